//! Results CSV. One row per (trial, round); metrics print with Rust's
//! shortest-round-trip float formatting, so identical runs serialize to
//! identical bytes. Metrics without a value (no held-out set) leave their
//! cell empty.

use std::io::Write;

use fedlft_core::RoundReport;

pub const CSV_HEADER: &str =
    "trial,round,train_rmse,test_rmse,test_mae,weighted_loss,client_bytes,server_bytes";

pub fn write_csv<'a, W, I>(out: &mut W, rows: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (u64, &'a RoundReport)>,
{
    writeln!(out, "{CSV_HEADER}")?;
    for (trial, r) in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            trial,
            r.round,
            r.train_rmse,
            opt(r.test_rmse),
            opt(r.test_mae),
            r.weighted_loss,
            r.client_bytes_total,
            r.server_bytes
        )?;
    }
    out.flush()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(round: u64, with_test: bool) -> RoundReport {
        RoundReport {
            round,
            train_rmse: 0.5,
            test_rmse: with_test.then_some(0.25),
            test_mae: with_test.then_some(0.125),
            weighted_loss: 1.75,
            client_bytes_total: 1200,
            server_bytes: 1200,
        }
    }

    #[test]
    fn header_and_rows_are_pinned() {
        let mut buf = Vec::new();
        let r0 = report(0, true);
        let r1 = report(1, false);
        write_csv(&mut buf, [(0u64, &r0), (0u64, &r1)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "trial,round,train_rmse,test_rmse,test_mae,weighted_loss,client_bytes,server_bytes"
        );
        assert_eq!(lines[1], "0,0,0.5,0.25,0.125,1.75,1200,1200");
        assert_eq!(lines[2], "0,1,0.5,,,1.75,1200,1200");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn float_cells_round_trip_through_text() {
        let values = [0.1, 1.0 / 3.0, 2.5e-17, 123456.789, f64::MIN_POSITIVE];
        for v in values {
            let printed = v.to_string();
            let back: f64 = printed.parse().unwrap();
            assert_eq!(v, back, "{printed}");
        }
    }

    #[test]
    fn identical_reports_serialize_identically() {
        let rows: Vec<RoundReport> = (0..5).map(|i| report(i, true)).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&mut a, rows.iter().map(|r| (2u64, r))).unwrap();
        write_csv(&mut b, rows.iter().map(|r| (2u64, r))).unwrap();
        assert_eq!(a, b);
    }
}
