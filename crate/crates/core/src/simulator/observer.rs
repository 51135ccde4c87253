//! Run loop, observers and event logs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Engine, Step};
use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::Site;

/// Hooks invoked by [`run`] and [`EventLog::replay`]. The configuration passed
/// to `before_flip` is the state just before the jump at `time`.
pub trait Observer {
    fn on_start(&mut self, _time: f64, _config: &Configuration) -> Result<()> {
        Ok(())
    }
    fn before_flip(&mut self, _time: f64, _site: Site, _config: &Configuration) -> Result<()> {
        Ok(())
    }
    fn after_flip(&mut self, _time: f64, _site: Site, _value: bool, _config: &Configuration) -> Result<()> {
        Ok(())
    }
    /// Called once at the horizon (also after absorption).
    fn on_finish(&mut self, _time: f64, _config: &Configuration) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_time: f64,
    pub events: u64,
    pub absorbed: bool,
    pub final_mass: usize,
}

/// Steps `engine` to `horizon`, feeding every flip to `observers`.
pub fn run<E: Engine + ?Sized>(
    engine: &mut E,
    horizon: f64,
    observers: &mut [&mut dyn Observer],
    budget: u64,
) -> Result<RunSummary> {
    if !(horizon >= engine.time()) {
        return Err(Error::InvalidParameter(format!("horizon {horizon} is before the current time {}", engine.time())));
    }
    for o in observers.iter_mut() {
        o.on_start(engine.time(), engine.config())?;
    }
    let start_events = engine.events();
    let mut absorbed = false;
    loop {
        match engine.next(horizon)? {
            Step::Event { time, site } => {
                if engine.events() - start_events >= budget {
                    return Err(Error::BudgetExceeded { budget, time });
                }
                for o in observers.iter_mut() {
                    o.before_flip(time, site, engine.config())?;
                }
                let value = engine.apply(site)?;
                for o in observers.iter_mut() {
                    o.after_flip(time, site, value, engine.config())?;
                }
            }
            Step::Horizon => break,
            Step::Absorbed => {
                absorbed = true;
                break;
            }
        }
    }
    for o in observers.iter_mut() {
        o.on_finish(horizon, engine.config())?;
    }
    Ok(RunSummary {
        final_time: horizon,
        events: engine.events() - start_events,
        absorbed,
        final_mass: engine.config().len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub site: Site,
    pub value: bool,
}

/// A recorded path: the initial configuration and every flip up to `horizon`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLog {
    pub initial: Configuration,
    pub events: Vec<EventRecord>,
    pub horizon: f64,
    pub complete: bool,
}

impl EventLog {
    pub fn new(dim: usize) -> EventLog {
        EventLog { initial: Configuration::new(dim), events: Vec::new(), horizon: 0.0, complete: false }
    }

    /// Feeds the recorded path to observers as if it were being simulated.
    pub fn replay(&self, observers: &mut [&mut dyn Observer]) -> Result<Configuration> {
        if !self.complete {
            return Err(Error::TruncatedLog("log was not closed at its horizon".into()));
        }
        let mut cfg = self.initial.clone();
        for o in observers.iter_mut() {
            o.on_start(0.0, &cfg)?;
        }
        let mut last = 0.0;
        for (k, ev) in self.events.iter().enumerate() {
            if !(ev.time >= last && ev.time <= self.horizon) {
                return Err(Error::TruncatedLog(format!("event {k} at time {} is out of order", ev.time)));
            }
            if cfg.contains(ev.site) == ev.value {
                return Err(Error::TruncatedLog(format!("event {k} sets {} to its current value", ev.site)));
            }
            for o in observers.iter_mut() {
                o.before_flip(ev.time, ev.site, &cfg)?;
            }
            cfg.set(ev.site, ev.value);
            for o in observers.iter_mut() {
                o.after_flip(ev.time, ev.site, ev.value, &cfg)?;
            }
            last = ev.time;
        }
        for o in observers.iter_mut() {
            o.on_finish(self.horizon, &cfg)?;
        }
        Ok(cfg)
    }

    /// Writes `time,site,new_value` rows; sites are written as space-separated coordinates.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let dim = self.initial.dim();
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "site", "new_value"])?;
        for ev in &self.events {
            let site: Vec<String> = ev.site.coords(dim).iter().map(|c| c.to_string()).collect();
            out.write_record([crate::report::fmt_f64(ev.time), site.join(" "), u8::from(ev.value).to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a log written by [`EventLog::write_csv`]. The log is marked complete;
    /// [`EventLog::replay`] rejects logs whose rows are inconsistent with the
    /// initial configuration or run past the horizon.
    pub fn read_csv<R: Read>(r: R, initial: Configuration, horizon: f64) -> Result<EventLog> {
        let dim = initial.dim();
        let mut rdr = csv::Reader::from_reader(r);
        let mut events = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::TruncatedLog(format!("row {k}: {e}")))?;
            if rec.len() != 3 {
                return Err(Error::TruncatedLog(format!("row {k} has {} fields", rec.len())));
            }
            let bad = |what: &str| Error::TruncatedLog(format!("row {k}: bad {what}"));
            let time: f64 = rec[0].parse().map_err(|_| bad("time"))?;
            let coords: Vec<i32> = rec[1].split_whitespace().map(|c| c.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("site"))?;
            if coords.len() != dim {
                return Err(bad("site dimension"));
            }
            let value = match &rec[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("value")),
            };
            events.push(EventRecord { time, site: Site::new(&coords)?, value });
        }
        Ok(EventLog { initial, events, horizon, complete: true })
    }
}

impl Observer for EventLog {
    fn on_start(&mut self, _time: f64, config: &Configuration) -> Result<()> {
        self.initial = config.clone();
        self.events.clear();
        self.complete = false;
        Ok(())
    }

    fn after_flip(&mut self, time: f64, site: Site, value: bool, _config: &Configuration) -> Result<()> {
        self.events.push(EventRecord { time, site, value });
        Ok(())
    }

    fn on_finish(&mut self, time: f64, _config: &Configuration) -> Result<()> {
        self.horizon = time;
        self.complete = true;
        Ok(())
    }
}

/// Records `|xi_t|` on a time grid together with `int_0^T |xi_s| ds` and the
/// number of jumps.
#[derive(Clone, Debug, Default)]
pub struct MassTracker {
    pub grid: Vec<f64>,
    pub mass: Vec<usize>,
    pub integral: f64,
    pub jumps: u64,
    last: f64,
    current: usize,
}

impl MassTracker {
    pub fn new(grid: Vec<f64>) -> MassTracker {
        MassTracker { grid, ..Default::default() }
    }

    fn advance(&mut self, t: f64) {
        while self.mass.len() < self.grid.len() && self.grid[self.mass.len()] < t {
            self.mass.push(self.current);
        }
        self.integral += self.current as f64 * (t - self.last);
        self.last = t;
    }
}

impl Observer for MassTracker {
    fn on_start(&mut self, time: f64, config: &Configuration) -> Result<()> {
        self.mass.clear();
        self.integral = 0.0;
        self.jumps = 0;
        self.last = time;
        self.current = config.len();
        Ok(())
    }

    fn before_flip(&mut self, time: f64, _site: Site, _config: &Configuration) -> Result<()> {
        self.advance(time);
        Ok(())
    }

    fn after_flip(&mut self, _time: f64, _site: Site, _value: bool, config: &Configuration) -> Result<()> {
        self.current = config.len();
        self.jumps += 1;
        Ok(())
    }

    fn on_finish(&mut self, time: f64, _config: &Configuration) -> Result<()> {
        self.advance(time);
        while self.mass.len() < self.grid.len() && self.grid[self.mass.len()] <= time {
            self.mass.push(self.current);
        }
        Ok(())
    }
}
