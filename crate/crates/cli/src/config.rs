//! Config files: flat `key = value` lines whose keys are flag names.
//!
//! Entries are turned into `--key=value` arguments and placed before the
//! command-line arguments, so the parser rejects unknown keys exactly as it
//! rejects unknown flags, and explicit flags override file entries.

use std::path::Path;

use crate::CliError;

/// Flags that take no value; their entries must be `true` or `false`.
const SWITCHES: &[&str] = &["no-timestamp"];

pub fn parse(text: &str, source: &Path) -> Result<Vec<String>, CliError> {
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| CliError::Usage(format!("{}:{}: {msg}", source.display(), n + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-') {
            return Err(bad(&format!("invalid key {key:?}")));
        }
        if key == "config" {
            return Err(bad("config files cannot include other config files"));
        }
        if SWITCHES.contains(&key) {
            match value {
                "true" => args.push(format!("--{key}")),
                "false" => {}
                _ => return Err(bad(&format!("{key} must be true or false"))),
            }
        } else {
            args.push(format!("--{key}={value}"));
        }
    }
    Ok(args)
}

/// Value of `--config` in raw arguments, if any.
fn config_path(args: &[String]) -> Option<&str> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--" {
            return None;
        }
        if a == "--config" {
            return it.next().map(String::as_str);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p);
        }
    }
    None
}

/// Inserts the config file entries right after the subcommand name.
pub fn expand(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some(path) = config_path(argv.get(2..).unwrap_or(&[])) else {
        return Ok(argv);
    };
    let path = Path::new(path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let injected = parse(&text, path)?;
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_comments_and_switches() {
        let text = "# run settings\nepochs = 3\n\nloss=ldam\nno-timestamp = true\nwidths = 4,8\n";
        let args = parse(text, Path::new("c.txt")).unwrap();
        assert_eq!(args, ["--epochs=3", "--loss=ldam", "--no-timestamp", "--widths=4,8"]);
        assert!(parse("no-timestamp = false", Path::new("c")).unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse("epochs 3", Path::new("c")).is_err());
        assert!(parse("Epochs = 3", Path::new("c")).is_err());
        assert!(parse("config = other.txt", Path::new("c")).is_err());
        assert!(parse("no-timestamp = yes", Path::new("c")).is_err());
    }

    #[test]
    fn finds_config_flag() {
        let args: Vec<String> = ["--epochs", "3", "--config", "a.txt"].map(String::from).into();
        assert_eq!(config_path(&args), Some("a.txt"));
        let args: Vec<String> = ["--config=b.txt"].map(String::from).into();
        assert_eq!(config_path(&args), Some("b.txt"));
        assert_eq!(config_path(&[]), None);
    }
}
