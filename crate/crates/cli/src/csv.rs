//! Buffered CSV emission: one header, one row per result item, every row
//! carrying the full run context. Values print with 17 significant digits
//! so reruns can be compared byte for byte.

pub const HEADER: &str = "command,config_hash,seed,n_steps,n_paths,item,value,std_error,status";

pub fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Pass,
    Fail,
    Assumed,
}

impl Status {
    pub fn from_bool(pass: bool) -> Self {
        if pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Assumed => "assumed",
        }
    }
}

#[derive(Debug)]
pub struct CsvSink {
    command: &'static str,
    config_hash: String,
    seed: u64,
    n_steps: usize,
    n_paths: usize,
    rows: Vec<String>,
    any_fail: bool,
}

impl CsvSink {
    pub fn new(
        command: &'static str,
        config_hash: String,
        seed: u64,
        n_steps: usize,
        n_paths: usize,
    ) -> Self {
        CsvSink {
            command,
            config_hash,
            seed,
            n_steps,
            n_paths,
            rows: Vec::new(),
            any_fail: false,
        }
    }

    pub fn row(&mut self, item: &str, value: f64, std_error: f64, status: Status) {
        if status == Status::Fail {
            self.any_fail = true;
        }
        self.rows.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            self.command,
            self.config_hash,
            self.seed,
            self.n_steps,
            self.n_paths,
            item,
            fmt_value(value),
            fmt_value(std_error),
            status.as_str()
        ));
    }

    /// Print header and rows; returns whether every row passed.
    pub fn emit(self) -> bool {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        print!("{out}");
        !self.any_fail
    }
}
