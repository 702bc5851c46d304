//! Text persistence: the word2vec-style embedding table format and the model
//! checkpoint container built from it.
//!
//! Embedding format: a header line `<total_rows> <dim>`, then one line per
//! row, `"<field>:<id> v1 ... v_dim"`. Values are written with 17 significant
//! digits, which round-trips every finite f64 exactly.
//!
//! Checkpoint format: a magic line, a `[config]` section of `key=value`
//! lines, then one `[table <name>]` section per matrix, each holding an
//! embedding-format block whose tokens are `<name>:<row>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diffcore::Matrix;
use crate::error::{MfnError, Result};

const CHECKPOINT_MAGIC: &str = "mfn-checkpoint 1";

/// 17 significant digits: lossless decimal serialization for f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| MfnError::parse(line, format!("invalid float `{token}`")))?;
    if !v.is_finite() {
        return Err(MfnError::parse(line, format!("non-finite value `{token}`")));
    }
    Ok(v)
}

/// Serializes named tables into one embedding-format string.
pub fn tables_to_string(named: &[(&str, &Matrix)]) -> String {
    let total: usize = named.iter().map(|(_, m)| m.rows()).sum();
    let dim = named.first().map(|(_, m)| m.cols()).unwrap_or(0);
    let mut out = String::new();
    out.push_str(&format!("{total} {dim}\n"));
    for (name, m) in named {
        assert_eq!(m.cols(), dim, "all tables in one file share a dimension");
        for i in 0..m.rows() {
            out.push_str(&format!("{name}:{i}"));
            for &v in m.row(i) {
                out.push(' ');
                out.push_str(&format_f64(v));
            }
            out.push('\n');
        }
    }
    out
}

/// Parses an embedding-format string into `(field, table)` pairs, ordered by
/// first appearance. Every field's ids must cover `0..n` exactly once.
pub fn tables_from_str(text: &str) -> Result<Vec<(String, Matrix)>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| MfnError::parse(1, "empty file, expected `<rows> <dim>` header"))?;
    let mut parts = header.split_whitespace();
    let rows: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| MfnError::parse(1, format!("malformed header `{header}`")))?;
    let dim: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| MfnError::parse(1, format!("malformed header `{header}`")))?;
    if parts.next().is_some() {
        return Err(MfnError::parse(1, format!("malformed header `{header}`")));
    }
    if dim == 0 {
        return Err(MfnError::parse(1, "dimension must be positive"));
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_field: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut seen = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if seen == rows {
            return Err(MfnError::parse(
                line_no,
                format!("expected {rows} data lines, found more"),
            ));
        }
        let mut tokens = line.split_whitespace();
        let token = tokens
            .next()
            .ok_or_else(|| MfnError::parse(line_no, "empty data line"))?;
        let (field, id_str) = token
            .rsplit_once(':')
            .ok_or_else(|| MfnError::parse(line_no, format!("token `{token}` lacks `field:id` form")))?;
        if field.is_empty() {
            return Err(MfnError::parse(line_no, format!("token `{token}` has an empty field")));
        }
        let id: usize = id_str
            .parse()
            .map_err(|_| MfnError::parse(line_no, format!("invalid row id in `{token}`")))?;
        let mut values = Vec::with_capacity(dim);
        for t in tokens {
            values.push(parse_f64(t, line_no)?);
        }
        if values.len() != dim {
            return Err(MfnError::parse(
                line_no,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        let entry = by_field.entry(field.to_string()).or_insert_with(|| {
            order.push(field.to_string());
            BTreeMap::new()
        });
        if entry.insert(id, values).is_some() {
            return Err(MfnError::parse(line_no, format!("duplicate token `{token}`")));
        }
        seen += 1;
    }
    if seen != rows {
        let line_no = seen + 2;
        return Err(MfnError::parse(
            line_no,
            format!("expected {rows} data lines, found {seen}"),
        ));
    }

    let mut out = Vec::with_capacity(order.len());
    for field in order {
        let rows_map = by_field.remove(&field).expect("field recorded on insert");
        let n = rows_map.len();
        let mut data = Vec::with_capacity(n * dim);
        for (want, (id, values)) in rows_map.into_iter().enumerate() {
            if id != want {
                return Err(MfnError::Data(format!(
                    "field `{field}` is missing id {want} (ids must cover 0..{n})"
                )));
            }
            data.extend_from_slice(&values);
        }
        out.push((field, Matrix::from_vec(n, dim, data)));
    }
    Ok(out)
}

pub fn save_tables(path: impl AsRef<Path>, named: &[(&str, &Matrix)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tables_to_string(named))
        .map_err(|e| MfnError::io(path.display().to_string(), e))
}

pub fn load_tables(path: impl AsRef<Path>) -> Result<Vec<(String, Matrix)>> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| MfnError::io(path.display().to_string(), e))?;
    tables_from_str(&text)
}

/// Serializes a checkpoint: config echo plus named tables.
pub fn checkpoint_to_string(config: &[(String, String)], tables: &[(&str, &Matrix)]) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str("[config]\n");
    for (k, v) in config {
        out.push_str(&format!("{k}={v}\n"));
    }
    for (name, m) in tables {
        out.push_str(&format!("[table {name}]\n"));
        out.push_str(&tables_to_string(&[(name, m)]));
    }
    out
}

/// Parses a checkpoint into its config pairs and named matrices.
pub fn checkpoint_from_str(text: &str) -> Result<(Vec<(String, String)>, Vec<(String, Matrix)>)> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        Some((_, l)) => {
            return Err(MfnError::parse(1, format!("bad magic `{l}`, expected `{CHECKPOINT_MAGIC}`")))
        }
        None => return Err(MfnError::parse(1, "empty checkpoint")),
    }
    match lines.next() {
        Some((_, "[config]")) => {}
        other => {
            let line = other.map(|(i, _)| i + 1).unwrap_or(2);
            return Err(MfnError::parse(line, "expected `[config]` section"));
        }
    }
    let mut config = Vec::new();
    while let Some(&(_, l)) = lines.peek() {
        if l.starts_with('[') {
            break;
        }
        let (idx, l) = lines.next().expect("peeked");
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| MfnError::parse(idx + 1, format!("expected key=value, got `{l}`")))?;
        config.push((k.to_string(), v.to_string()));
    }

    let mut tables = Vec::new();
    while let Some((idx, header)) = lines.next() {
        let line_no = idx + 1;
        let name = header
            .strip_prefix("[table ")
            .and_then(|h| h.strip_suffix(']'))
            .ok_or_else(|| MfnError::parse(line_no, format!("expected `[table <name>]`, got `{header}`")))?;
        // Collect this section's block (header line + data lines).
        let mut block = String::new();
        let (_, table_header) = lines
            .next()
            .ok_or_else(|| MfnError::parse(line_no + 1, "missing table header"))?;
        block.push_str(table_header);
        block.push('\n');
        while let Some(&(_, l)) = lines.peek() {
            if l.starts_with("[table ") {
                break;
            }
            let (_, l) = lines.next().expect("peeked");
            block.push_str(l);
            block.push('\n');
        }
        let mut parsed = tables_from_str(&block).map_err(|e| match e {
            MfnError::Parse { line, msg } => MfnError::parse(line_no + line, msg),
            other => other,
        })?;
        if parsed.len() != 1 || parsed[0].0 != name {
            return Err(MfnError::parse(
                line_no,
                format!("section `{name}` must contain exactly the `{name}` table"),
            ));
        }
        let (n, m) = parsed.remove(0);
        tables.push((n, m));
    }
    Ok((config, tables))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &[(String, String)],
    tables: &[(&str, &Matrix)],
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(config, tables))
        .map_err(|e| MfnError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(Vec<(String, String)>, Vec<(String, Matrix)>)> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| MfnError::io(path.display().to_string(), e))?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-10.0..10.0));
        let b = Matrix::from_fn(2, 3, |_, _| rng.gen_range(-1e-8..1e-8));
        let text = tables_to_string(&[("alpha", &a), ("beta", &b)]);
        let parsed = tables_from_str(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0], ("alpha".to_string(), a));
        assert_eq!(parsed[1], ("beta".to_string(), b));
    }

    #[test]
    fn extra_data_line_errors_at_line_4() {
        let text = "2 3\na:0 1 2 3\na:1 4 5 6\na:2 7 8 9\n";
        let err = tables_from_str(text).unwrap_err();
        match err {
            MfnError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_data_line_reports_expected_count() {
        let text = "3 2\na:0 1 2\na:1 3 4\n";
        let err = tables_from_str(text).unwrap_err().to_string();
        assert!(err.contains("expected 3 data lines, found 2"), "{err}");
    }

    #[test]
    fn hand_written_fixture_loads() {
        let text = "2 3\nword:0 0.5 -1 2.25\nword:1 1e-3 0 3\n";
        let parsed = tables_from_str(text).unwrap();
        assert_eq!(parsed[0].0, "word");
        assert_eq!(parsed[0].1.row(0), &[0.5, -1.0, 2.25]);
        assert_eq!(parsed[0].1.row(1), &[1e-3, 0.0, 3.0]);
    }

    #[test]
    fn duplicate_token_rejected() {
        let text = "2 1\na:0 1\na:0 2\n";
        let err = tables_from_str(text).unwrap_err().to_string();
        assert!(err.contains("duplicate token"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let text = "1 3\na:0 1 2\n";
        let err = tables_from_str(text).unwrap_err().to_string();
        assert!(err.contains("expected 3 values"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        let text = "1 2\na:0 1 inf\n";
        assert!(tables_from_str(text).is_err());
        let text = "1 2\na:0 NaN 0\n";
        assert!(tables_from_str(text).is_err());
    }

    #[test]
    fn missing_id_rejected() {
        let text = "2 1\na:0 1\na:2 2\n";
        let err = tables_from_str(text).unwrap_err().to_string();
        assert!(err.contains("missing id 1"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 1e-17]]);
        let w = Matrix::from_rows(&[vec![0.25]]);
        let config = vec![
            ("seed".to_string(), "7".to_string()),
            ("d".to_string(), "2".to_string()),
        ];
        let text = checkpoint_to_string(&config, &[("emb:iid", &m), ("head.w", &w)]);
        let (c2, t2) = checkpoint_from_str(&text).unwrap();
        assert_eq!(c2, config);
        assert_eq!(t2[0], ("emb:iid".to_string(), m));
        assert_eq!(t2[1], ("head.w".to_string(), w));
    }

    #[test]
    fn checkpoint_bad_magic() {
        assert!(checkpoint_from_str("nope\n").is_err());
        assert!(checkpoint_from_str("").is_err());
    }

    #[test]
    fn parsers_survive_junk_without_panicking() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let len = rng.gen_range(0..200);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen_range(0x20..0x7f) as u8).collect();
            let s = String::from_utf8(bytes).unwrap();
            let _ = tables_from_str(&s);
            let _ = checkpoint_from_str(&s);
        }
    }
}
