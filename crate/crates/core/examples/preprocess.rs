//! Log-transform a phenotype table with zero replacement and rescale ages to study time.

use lgh::cli::{preprocess_table, PreprocessArgs, TimeRescale};
use lgh::io::Table;

fn main() -> lgh::Result<()> {
    let mut table = Table::new(&["subject_id", "time", "y"]);
    for (id, age, psa) in [("A", "54", "0"), ("A", "55", "0.8"), ("B", "70", "NA"), ("B", "80", "2.5")] {
        table.push(vec![id.into(), age.into(), psa.into()]);
    }
    let args = PreprocessArgs {
        pheno: "in.tsv".into(),
        out_dir: "out".into(),
        log_transform: true,
        zero_replace: lgh::cli::DEFAULT_ZERO_REPLACE,
        time_rescale: TimeRescale::Plco,
        span_min: None,
        span_range: None,
    };
    let report = preprocess_table(&mut table, &args)?;
    print!("{}", table.to_tsv());
    println!("{report:?}");
    Ok(())
}
