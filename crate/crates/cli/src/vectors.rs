//! Vector arguments: inline comma-separated values or a single-column file.
//! Inline values take precedence when both are given.

use std::path::Path;

use rnn_constctl::linalg::Vector;

use crate::CliError;

pub struct VectorArg<'a> {
    name: &'a str,
    inline: Option<&'a str>,
    file: Option<&'a Path>,
}

impl<'a> VectorArg<'a> {
    pub fn new(name: &'a str, inline: Option<&'a str>, file: Option<&'a Path>) -> Self {
        Self { name, inline, file }
    }

    pub fn read(&self) -> Result<Vector, CliError> {
        match (self.inline, self.file) {
            (Some(s), _) => parse_inline(self.name, s),
            (None, Some(path)) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                parse_column(self.name, &text)
            }
            (None, None) => Err(CliError::Usage(format!(
                "missing {0}: pass --{0} or --{0}-file",
                self.name
            ))),
        }
    }
}

fn parse_value(name: &str, token: &str) -> Result<f64, CliError> {
    let v: f64 = token
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{name}: '{}' is not a number", token.trim())))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("{name}: non-finite entry")))
    }
}

pub fn parse_inline(name: &str, s: &str) -> Result<Vector, CliError> {
    let values = s
        .split(',')
        .map(|t| parse_value(name, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Vector::from_vec(values))
}

/// One value per line; blank lines and `#` comments are skipped.
pub fn parse_column(name: &str, text: &str) -> Result<Vector, CliError> {
    let values = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| parse_value(name, l))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(CliError::Usage(format!("{name}: file holds no values")));
    }
    Ok(Vector::from_vec(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_beats_file() {
        let v = VectorArg::new("x0", Some("1,2.5"), Some(Path::new("/nonexistent")))
            .read()
            .unwrap();
        assert_eq!(v.as_slice(), &[1.0, 2.5]);
    }

    #[test]
    fn column_skips_comments() {
        let v = parse_column("x", "# state\n1\n\n-2e-1\n").unwrap();
        assert_eq!(v.as_slice(), &[1.0, -0.2]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_inline("x", "1,,2").is_err());
        assert!(parse_inline("x", "nan").is_err());
        assert!(parse_column("x", "\n#\n").is_err());
    }
}
