use std::fmt;
use std::path::Path;

/// A failure printed as `error: <class>: <message>` on one line.
#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    pub msg: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self {
            class: "invalid-input",
            msg: msg.into(),
        }
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Self {
            class: "internal",
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            class: "io",
            msg: format!("{}: {e}", path.display()),
        }
    }

    pub fn parse(path: &Path, e: &toml::de::Error) -> Self {
        let line = e
            .span()
            .and_then(|s| std::fs::read_to_string(path).ok().map(|t| t[..s.start.min(t.len())].lines().count().max(1)));
        let msg = e.message().to_string();
        Self {
            class: "parse",
            msg: match line {
                Some(l) => format!("{} line {l}: {msg}", path.display()),
                None => format!("{}: {msg}", path.display()),
            },
        }
    }

    pub fn in_file(self, path: &Path) -> Self {
        Self {
            class: self.class,
            msg: format!("{}: {}", path.display(), self.msg),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg: Vec<&str> = self.msg.split_whitespace().collect();
        write!(f, "error: {}: {}", self.class, msg.join(" "))
    }
}

impl From<tps_sdf::Error> for CliError {
    fn from(e: tps_sdf::Error) -> Self {
        Self {
            class: e.class(),
            msg: e.detail(),
        }
    }
}
