use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use miv_att::simulation::ReplicationSummary;
use miv_att::Dataset;

use crate::CliError;

/// Read a dataset with required `y`, `a`, `z` columns (any case). Every other
/// column is a numeric covariate, kept in file order.
pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    parse_dataset(file)
}

pub fn parse_dataset<R: Read>(reader: R) -> Result<Dataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::input(format!("cannot read CSV header: {e}")))?.clone();
    let find = |name: &str| -> Result<usize, CliError> {
        let hits: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.eq_ignore_ascii_case(name))
            .map(|(j, _)| j)
            .collect();
        match hits.as_slice() {
            [j] => Ok(*j),
            [] => Err(CliError::input(format!("missing required column '{name}'"))),
            _ => Err(CliError::input(format!("column '{name}' appears more than once"))),
        }
    };
    let (jy, ja, jz) = (find("y")?, find("a")?, find("z")?);
    let cov: Vec<usize> = (0..headers.len()).filter(|j| ![jy, ja, jz].contains(j)).collect();
    let names: Vec<String> = cov.iter().map(|&j| headers[j].to_string()).collect();

    let (mut y, mut a, mut z, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        // Row numbers are 1-based data rows; the header is row 0.
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::input(format!("row {row}: {e}")))?;
        let cell = |j: usize| -> Result<f64, CliError> {
            let s = &rec[j];
            if s.is_empty() {
                return Err(CliError::input(format!("row {row}, column '{}': missing value", &headers[j])));
            }
            s.parse::<f64>()
                .map_err(|_| CliError::input(format!("row {row}, column '{}': not a number: {s:?}", &headers[j])))
        };
        y.push(cell(jy)?);
        a.push(cell(ja)?);
        z.push(cell(jz)?);
        x.push(cov.iter().map(|&j| cell(j)).collect::<Result<Vec<f64>, _>>()?);
    }
    Dataset::with_names(y, a, z, x, names).map_err(CliError::from_core)
}

/// Observed columns only; reals are written in shortest round-trip form.
pub fn write_dataset<W: Write>(data: &Dataset, out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["y".to_string(), "a".to_string(), "z".to_string()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![fmt_real(data.y()[i]), fmt_real(data.a()[i]), fmt_real(data.z()[i])];
        rec.extend(data.x(i).iter().map(|&v| fmt_real(v)));
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn write_summaries<W: Write>(rows: &[ReplicationSummary], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "N", "replicates", "bias", "ase", "ese", "coverage", "failures"])?;
    for s in rows {
        w.write_record([
            s.estimator.name().to_string(),
            s.n.to_string(),
            s.replicates.to_string(),
            fmt_real(s.bias),
            fmt_real(s.ase),
            s.ese.map(fmt_real).unwrap_or_default(),
            fmt_real(s.coverage),
            s.failures.to_string(),
        ])?;
    }
    w.flush()
}

fn fmt_real(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use miv_att::simulation::{generate_dgp4, Dgp4Params};

    #[test]
    fn columns_case_insensitive_and_covariates_in_order() {
        let text = "Z,w,Y,v,A\n1,0.5,2.0,7,0\n0,1.5,3.0,8,1\n";
        let d = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.y(), &[2.0, 3.0]);
        assert_eq!(d.a(), &[0.0, 1.0]);
        assert_eq!(d.z(), &[1.0, 0.0]);
        assert_eq!(d.covariate_names(), &["w".to_string(), "v".to_string()]);
        assert_eq!(d.x(1), &[1.5, 8.0]);
    }

    #[test]
    fn missing_column_is_named() {
        let e = parse_dataset("y,a,x1\n1,0,2\n".as_bytes()).unwrap_err();
        assert_eq!(e.code(), 2);
        assert!(e.to_string().contains("'z'"), "{e}");
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let e = parse_dataset("y,a,z,x1\n1,0,1,2\n1,0,1,\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("row 2, column 'x1'"), "{e}");
        let e = parse_dataset("y,a,z\n1,zero,1\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("row 1, column 'a'"), "{e}");
    }

    #[test]
    fn round_trip_is_exact() {
        let d = generate_dgp4(&Dgp4Params::default(), 200, 5).unwrap().data;
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = parse_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }
}
