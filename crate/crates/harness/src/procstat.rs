//! CPU time of service and client processes.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

fn ticks_per_second() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 {
        t as f64
    } else {
        100.0
    }
}

/// utime + stime from the text of `/proc/<pid>/stat`, in ticks.
pub fn parse_stat_ticks(stat: &str) -> Option<u64> {
    let rest = &stat[stat.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(utime + stime)
}

/// CPU seconds consumed so far by a live process, all threads included.
pub fn process_cpu_seconds(pid: u32) -> Option<f64> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    Some(parse_stat_ticks(&stat)? as f64 / ticks_per_second())
}

fn rusage_seconds(who: libc::c_int) -> f64 {
    // SAFETY: getrusage fills the zeroed struct we pass.
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    if unsafe { libc::getrusage(who, &mut usage) } != 0 {
        return 0.0;
    }
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(usage.ru_utime) + tv(usage.ru_stime)
}

/// CPU seconds of all reaped children of this process.
pub fn reaped_children_cpu_seconds() -> f64 {
    rusage_seconds(libc::RUSAGE_CHILDREN)
}

pub fn own_cpu_seconds() -> f64 {
    rusage_seconds(libc::RUSAGE_SELF)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuSample {
    pub t_s: f64,
    pub process: String,
    pub cpu_s: f64,
}

pub const CPU_HEADER: &str = "t_s,process,cpu_s";

/// Polls a changing set of processes once per period.
pub struct CpuSampler {
    targets: Arc<Mutex<Vec<(String, u32)>>>,
    samples: Arc<Mutex<Vec<CpuSample>>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl CpuSampler {
    pub fn start(period: Duration, epoch: Instant) -> Self {
        let targets: Arc<Mutex<Vec<(String, u32)>>> = Arc::default();
        let samples: Arc<Mutex<Vec<CpuSample>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let (targets, samples, stop) = (targets.clone(), samples.clone(), stop.clone());
            std::thread::spawn(move || {
                let mut next = Instant::now();
                while !stop.load(Ordering::Relaxed) {
                    if Instant::now() >= next {
                        let t_s = epoch.elapsed().as_secs_f64();
                        let current = targets.lock().unwrap().clone();
                        let mut out = samples.lock().unwrap();
                        for (process, pid) in current {
                            if let Some(cpu_s) = process_cpu_seconds(pid) {
                                out.push(CpuSample { t_s, process, cpu_s });
                            }
                        }
                        next += period;
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
            })
        };
        CpuSampler {
            targets,
            samples,
            stop,
            thread: Some(thread),
        }
    }

    pub fn watch(&self, name: &str, pid: u32) {
        self.targets.lock().unwrap().push((name.to_string(), pid));
    }

    pub fn unwatch(&self, pid: u32) {
        self.targets.lock().unwrap().retain(|&(_, p)| p != pid);
    }

    pub fn finish(mut self) -> Vec<CpuSample> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        std::mem::take(&mut *self.samples.lock().unwrap())
    }
}

impl Drop for CpuSampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

pub fn cpu_csv(samples: &[CpuSample]) -> String {
    let mut out = format!("{CPU_HEADER}\n");
    for s in samples {
        out.push_str(&format!("{:.3},{},{:.3}\n", s.t_s, s.process, s.cpu_s));
    }
    out
}

pub fn parse_cpu_csv(text: &str) -> crate::Result<Vec<CpuSample>> {
    crate::csv_body(text, CPU_HEADER)?
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let [t, process, cpu] = f[..] else {
                return Err(crate::HarnessError::Csv(format!("`{line}`: expected 3 fields")));
            };
            Ok(CpuSample {
                t_s: crate::csv_f64(t)?,
                process: process.to_string(),
                cpu_s: crate::csv_f64(cpu)?,
            })
        })
        .collect()
}
