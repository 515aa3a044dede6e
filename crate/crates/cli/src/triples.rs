//! Line-oriented triple files: one observed entry per line as four
//! whitespace-separated fields `user service time value`. Lines starting
//! with `#` are comments, except `# shape I J K`, which declares the dense
//! bounds. Shape resolution order: an explicit [`LoadOptions::shape`] wins,
//! then the directive, then per-axis max index plus one.

use std::fs;
use std::io::Write;
use std::path::Path;

use fedlft_core::{Entry, Shape, SparseTensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error("line {line}: coordinate ({user}, {service}, {time}) is outside the shape")]
    OutOfBounds {
        line: usize,
        user: usize,
        service: usize,
        time: usize,
    },
    #[error("cannot infer a shape from an entryless file; pass one explicitly")]
    NoShape,
    #[error(transparent)]
    Tensor(TensorError),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Overrides any `# shape` directive in the file.
    pub shape: Option<Shape>,
    /// Treat coordinates in the file as starting at 1 instead of 0.
    pub one_based: bool,
}

pub fn load(path: &Path, opts: &LoadOptions) -> Result<SparseTensor, LoadError> {
    parse(&fs::read_to_string(path)?, opts)
}

pub fn parse(text: &str, opts: &LoadOptions) -> Result<SparseTensor, LoadError> {
    let mut directive: Option<Shape> = None;
    let mut entries: Vec<Entry> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(dims) = rest.trim().strip_prefix("shape") {
                directive = Some(parse_shape_directive(dims, line_no)?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(LoadError::Parse {
                line: line_no,
                what: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let user = parse_index(fields[0], "user", line_no, opts.one_based)?;
        let service = parse_index(fields[1], "service", line_no, opts.one_based)?;
        let time = parse_index(fields[2], "time", line_no, opts.one_based)?;
        let value: f64 = fields[3].parse().map_err(|_| LoadError::Parse {
            line: line_no,
            what: format!("value `{}` is not a real number", fields[3]),
        })?;
        entries.push(Entry { user, service, time, value });
        lines.push(line_no);
    }

    let shape = match opts.shape.or(directive) {
        Some(s) => s,
        None => infer_shape(&entries)?,
    };

    SparseTensor::build(shape, entries).map_err(|e| attribute_line(e, &lines))
}

pub fn save(t: &SparseTensor, path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(
        out,
        "# shape {} {} {}",
        t.shape().num_users,
        t.shape().num_services,
        t.shape().num_times
    )?;
    for e in t.entries() {
        writeln!(out, "{} {} {} {}", e.user, e.service, e.time, e.value)?;
    }
    out.flush()
}

fn parse_shape_directive(dims: &str, line: usize) -> Result<Shape, LoadError> {
    let fields: Vec<&str> = dims.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(LoadError::Parse {
            line,
            what: format!("shape directive needs 3 axis sizes, found {}", fields.len()),
        });
    }
    let mut axes = [0usize; 3];
    for (i, f) in fields.iter().enumerate() {
        axes[i] = f.parse().map_err(|_| LoadError::Parse {
            line,
            what: format!("shape axis `{f}` is not a nonnegative integer"),
        })?;
    }
    Shape::new(axes[0], axes[1], axes[2]).map_err(|e| LoadError::Parse {
        line,
        what: e.to_string(),
    })
}

fn parse_index(field: &str, name: &str, line: usize, one_based: bool) -> Result<usize, LoadError> {
    let raw: usize = field.parse().map_err(|_| LoadError::Parse {
        line,
        what: format!("{name} index `{field}` is not a nonnegative integer"),
    })?;
    if one_based {
        raw.checked_sub(1).ok_or_else(|| LoadError::Parse {
            line,
            what: format!("{name} index 0 in a one-based file"),
        })
    } else {
        Ok(raw)
    }
}

fn infer_shape(entries: &[Entry]) -> Result<Shape, LoadError> {
    if entries.is_empty() {
        return Err(LoadError::NoShape);
    }
    let (mut u, mut s, mut t) = (0, 0, 0);
    for e in entries {
        u = u.max(e.user);
        s = s.max(e.service);
        t = t.max(e.time);
    }
    Ok(Shape::new(u + 1, s + 1, t + 1).expect("axes are max index + 1, nonzero"))
}

/// Maps a positional build failure back to its source line.
fn attribute_line(e: TensorError, lines: &[usize]) -> LoadError {
    match e {
        TensorError::OutOfBounds { position, user, service, time } => LoadError::OutOfBounds {
            line: lines[position],
            user,
            service,
            time,
        },
        TensorError::NonFinite { position } => LoadError::Parse {
            line: lines[position],
            what: "value is not finite".into(),
        },
        other => LoadError::Tensor(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> LoadOptions {
        LoadOptions::default()
    }

    #[test]
    fn minimal_file_with_directive() {
        let t = parse("# shape 1 1 1\n0 0 0 1.5\n", &opts()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.entries()[0].value, 1.5);
        assert_eq!(*t.shape(), Shape::new(1, 1, 1).unwrap());
    }

    #[test]
    fn shape_is_inferred_from_max_indices() {
        let t = parse("2 0 0 1.0\n0 4 1 2.0\n", &opts()).unwrap();
        assert_eq!(*t.shape(), Shape::new(3, 5, 2).unwrap());
    }

    #[test]
    fn explicit_shape_beats_the_directive() {
        let o = LoadOptions {
            shape: Some(Shape::new(9, 9, 9).unwrap()),
            one_based: false,
        };
        let t = parse("# shape 1 1 1\n0 0 0 1.0\n", &o).unwrap();
        assert_eq!(*t.shape(), Shape::new(9, 9, 9).unwrap());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let t = parse("# a comment\n\n  \n0 0 0 3.25\n# trailing\n", &opts()).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn non_numeric_value_reports_its_line() {
        let err = parse("0 0 0 1.0\n0 0 1 abc\n", &opts()).unwrap_err();
        match err {
            LoadError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn wrong_field_count_reports_its_line() {
        let err = parse("0 0 0\n", &opts()).unwrap_err();
        match err {
            LoadError::Parse { line, what } => {
                assert_eq!(line, 1);
                assert!(what.contains("4 fields"));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn out_of_bounds_reports_the_guilty_line() {
        let err = parse("# shape 2 2 2\n0 0 0 1.0\n0 5 0 1.0\n", &opts()).unwrap_err();
        match err {
            LoadError::OutOfBounds { line, service, .. } => {
                assert_eq!(line, 3);
                assert_eq!(service, 5);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn non_finite_value_reports_its_line() {
        let err = parse("0 0 0 1.0\n0 0 1 inf\n", &opts()).unwrap_err();
        match err {
            LoadError::Parse { line, what } => {
                assert_eq!(line, 2);
                assert!(what.contains("finite"));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn duplicates_are_rejected() {
        let err = parse("0 0 0 1.0\n0 0 0 2.0\n", &opts()).unwrap_err();
        assert!(matches!(err, LoadError::Tensor(TensorError::Duplicate { .. })));
    }

    #[test]
    fn one_based_files_shift_down() {
        let o = LoadOptions {
            shape: None,
            one_based: true,
        };
        let t = parse("1 1 1 5.0\n2 3 1 6.0\n", &o).unwrap();
        assert_eq!(t.entries()[0].user, 0);
        assert_eq!(t.entries()[1].service, 2);
        assert_eq!(*t.shape(), Shape::new(2, 3, 1).unwrap());

        let err = parse("0 1 1 5.0\n", &o).unwrap_err();
        assert!(matches!(err, LoadError::Parse { line: 1, .. }));
    }

    #[test]
    fn malformed_shape_directive_is_an_error() {
        assert!(parse("# shape 1 1\n0 0 0 1.0\n", &opts()).is_err());
        assert!(parse("# shape a b c\n0 0 0 1.0\n", &opts()).is_err());
        assert!(parse("# shape 0 1 1\n0 0 0 1.0\n", &opts()).is_err());
    }

    #[test]
    fn empty_file_without_shape_is_an_error() {
        assert!(matches!(parse("# nothing\n", &opts()), Err(LoadError::NoShape)));
        let o = LoadOptions {
            shape: Some(Shape::new(2, 2, 2).unwrap()),
            one_based: false,
        };
        let t = parse("", &o).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let original = parse("# shape 4 5 3\n0 0 0 1.5\n3 4 2 -0.25\n1 2 1 7.125\n", &opts()).unwrap();
        save(&original, &path).unwrap();
        let reloaded = load(&path, &opts()).unwrap();
        assert_eq!(original, reloaded);
    }
}
