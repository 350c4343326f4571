//! CSV trace files.
//!
//! Line 1 is `# ` followed by the JSON-encoded [`TraceHeader`]. The CSV body
//! has columns `k,u_1..u_n,y,e,phihat_1..phihat_n,w_1..w_n,alpha,phase`.
//! Floats are written in shortest round-trip form, so a re-import is
//! bit-exact. `alpha` is empty on rows where the estimate was not updated.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Phase, SimError, SimTrace, TraceHeader, TraceRow};

pub fn export_trace(trace: &SimTrace, path: impl AsRef<Path>) -> Result<(), SimError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(trace: &SimTrace, mut out: W) -> Result<(), SimError> {
    writeln!(out, "# {}", serde_json::to_string(&trace.header)?)?;
    let n = trace.header.n;
    let mut w = csv::Writer::from_writer(out);
    let mut cols = vec!["k".to_string()];
    cols.extend((1..=n).map(|i| format!("u_{i}")));
    cols.push("y".into());
    cols.push("e".into());
    cols.extend((1..=n).map(|i| format!("phihat_{i}")));
    cols.extend((1..=n).map(|i| format!("w_{i}")));
    cols.push("alpha".into());
    cols.push("phase".into());
    w.write_record(&cols)?;
    for r in &trace.rows {
        let mut rec = Vec::with_capacity(cols.len());
        rec.push(r.k.to_string());
        rec.extend(r.u.iter().map(|v| v.to_string()));
        rec.push(r.y.to_string());
        rec.push(r.e.to_string());
        rec.extend(r.phi_hat.iter().map(|v| v.to_string()));
        rec.extend(r.w.iter().map(|b| if *b { "1" } else { "0" }.to_string()));
        rec.push(r.alpha.map(|a| a.to_string()).unwrap_or_default());
        rec.push(r.phase.as_str().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_trace(path: impl AsRef<Path>) -> Result<SimTrace, SimError> {
    read_trace(std::fs::File::open(path)?)
}

pub fn read_trace<R: Read>(input: R) -> Result<SimTrace, SimError> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let json = first
        .strip_prefix('#')
        .ok_or_else(|| SimError::Trace("first line must be a '#' header".into()))?;
    let header: TraceHeader = serde_json::from_str(json.trim())?;
    let n = header.n;
    let mut rdr = csv::Reader::from_reader(reader);
    let expected = 3 * n + 5;
    if rdr.headers()?.len() != expected {
        return Err(SimError::Trace(format!(
            "expected {expected} columns for n = {n}, found {}",
            rdr.headers()?.len()
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64, SimError> {
            rec[i]
                .parse()
                .map_err(|_| SimError::Trace(format!("bad number {:?}", &rec[i])))
        };
        let k: usize = rec[0]
            .parse()
            .map_err(|_| SimError::Trace(format!("bad row index {:?}", &rec[0])))?;
        let u = (1..=n).map(f).collect::<Result<_, _>>()?;
        let y = f(n + 1)?;
        let e = f(n + 2)?;
        let phi_hat = (n + 3..2 * n + 3).map(f).collect::<Result<_, _>>()?;
        let w = (2 * n + 3..3 * n + 3)
            .map(|i| match &rec[i] {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(SimError::Trace(format!("bad mask entry {other:?}"))),
            })
            .collect::<Result<_, _>>()?;
        let alpha = match &rec[3 * n + 3] {
            "" => None,
            _ => Some(f(3 * n + 3)?),
        };
        let phase = Phase::parse(&rec[3 * n + 4])
            .ok_or_else(|| SimError::Trace(format!("bad phase {:?}", &rec[3 * n + 4])))?;
        rows.push(TraceRow {
            k,
            u,
            y,
            e,
            phi_hat,
            w,
            alpha,
            phase,
        });
    }
    Ok(SimTrace {
        header,
        rows,
        line_flows: Vec::new(),
    })
}
