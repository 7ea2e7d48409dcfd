use std::io::{self, Write};

/// One completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Batch means of the minimization loss components.
    pub ce: f64,
    pub contrastive: f64,
    pub entropy: f64,
    /// Mean ascent objective at the initial and final parameters; `None`
    /// when the epoch generated nothing.
    pub max_obj_start: Option<f64>,
    pub max_obj_end: Option<f64>,
    pub mean_feat_dist: Option<f64>,
    pub non_finite: usize,
    /// Generated domains held after the epoch.
    pub pool_len: usize,
    pub accuracies: Vec<(String, f64)>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,ce,contrastive,entropy,max_obj_start,max_obj_end,mean_feat_dist,acc_<domain>...,seconds`;
    /// generation columns are empty for epochs that generated nothing.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let domains: Vec<&str> = self.records.first().map_or(Vec::new(), |r| r.accuracies.iter().map(|(d, _)| d.as_str()).collect());
        write!(w, "epoch,ce,contrastive,entropy,max_obj_start,max_obj_end,mean_feat_dist")?;
        for d in &domains {
            write!(w, ",acc_{d}")?;
        }
        writeln!(w, ",seconds")?;
        for r in &self.records {
            write!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.ce,
                r.contrastive,
                r.entropy,
                opt(r.max_obj_start),
                opt(r.max_obj_end),
                opt(r.mean_feat_dist)
            )?;
            for (_, a) in &r.accuracies {
                write!(w, ",{a}")?;
            }
            writeln!(w, ",{:.3}", r.seconds)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ascii")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 1,
                learning_rate: 1e-4,
                ce: 2.5,
                contrastive: 0.0,
                entropy: 2.0,
                max_obj_start: None,
                max_obj_end: None,
                mean_feat_dist: None,
                non_finite: 0,
                pool_len: 0,
                accuracies: vec![("source".into(), 0.5), ("inverted".into(), 0.25)],
                seconds: 1.5,
            }],
        };
        assert_eq!(
            log.to_csv(),
            "epoch,ce,contrastive,entropy,max_obj_start,max_obj_end,mean_feat_dist,acc_source,acc_inverted,seconds\n\
             1,2.5,0,2,,,,0.5,0.25,1.500\n"
        );
    }
}
