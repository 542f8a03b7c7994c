use std::path::Path;

use crate::run::{CODEBOOKS_CSV, RESULTS_CSV};
use crate::Failure;

fn print_table(path: &Path) -> Result<(), Failure> {
    let err = |e: csv::Error| Failure::failed(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let header: Vec<String> = r.headers().map_err(err)?.iter().map(String::from).collect();
    if header.is_empty() {
        return Ok(());
    }
    let mut rows = vec![header];
    for rec in r.records() {
        rows.push(rec.map_err(err)?.iter().map(String::from).collect());
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|row| row.get(c).map_or(0, |s| s.len())).max().unwrap_or(0))
        .collect();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        println!("| {} |", cells.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            println!("| {} |", rule.join(" | "));
        }
    }
    Ok(())
}

pub fn cmd_report(out: &Path) -> Result<(), Failure> {
    let results = out.join(RESULTS_CSV);
    if !results.exists() {
        return Err(Failure::config(format!("{} not found; run `secagg run` first", results.display())));
    }
    print_table(&results)?;
    let codebooks = out.join(CODEBOOKS_CSV);
    if codebooks.metadata().is_ok_and(|m| m.len() > 0) {
        println!();
        print_table(&codebooks)?;
    }
    Ok(())
}
