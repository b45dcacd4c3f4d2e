//! CSV and JSON artifacts. Floats are written in shortest round-trip form, so
//! identical runs produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::adjoint::{ClassicalAdjoints, SingularAdjoint};
use crate::conditions::ConditionReport;
use crate::error::{FbsdeError, Result};
use crate::hjb::ValueGrid;
use crate::malliavin::KernelEstimate;
use crate::simulate::{BackwardPaths, ForwardPaths};
use crate::variation::StudyResult;

/// Version of every JSON document written here.
pub const SCHEMA_VERSION: u32 = 1;

fn names(prefix: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![prefix.to_string()]
    } else {
        (1..=dim).map(|i| format!("{prefix}{i}")).collect()
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// `t,path_id,X..,Y,Z,u..,dxi..`; `Y` and `Z` are left empty without a
/// backward solve, and `Z`, `u`, `dxi` are empty on the terminal row.
pub fn write_paths_csv(path: &Path, fwd: &ForwardPaths, bwd: Option<&BackwardPaths>) -> Result<()> {
    let (n, k, m) = (fwd.x.dim(), fwd.u.dim(), fwd.dxi.dim());
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string(), "path_id".to_string()];
    header.extend(names("X", n));
    header.push("Y".into());
    header.push("Z".into());
    header.extend(names("u", k));
    header.extend(names("dxi", m));
    w.write_record(&header)?;
    let steps = fwd.grid.n_steps;
    for p in 0..fwd.n_paths() {
        for s in 0..=steps {
            let mut rec = vec![fmt(fwd.grid.time(s)), p.to_string()];
            rec.extend(fwd.x.get(s, p).iter().map(|v| fmt(*v)));
            rec.push(bwd.map_or(String::new(), |b| fmt(b.y.scalar(s, p))));
            if s < steps {
                rec.push(bwd.map_or(String::new(), |b| fmt(b.z.scalar(s, p))));
                rec.extend(fwd.u.get(s, p).iter().map(|v| fmt(*v)));
                rec.extend(fwd.dxi.get(s, p).iter().map(|v| fmt(*v)));
            } else {
                rec.extend(std::iter::repeat_n(String::new(), 1 + k + m));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `t,path_id,frak_p..,frak_q,p..,q..,P..,Q..,chi`; matrices row-major, and
/// the `q`, `Q` columns empty on the terminal row.
pub fn write_adjoint_csv(
    path: &Path,
    fwd: &ForwardPaths,
    sing: &SingularAdjoint,
    cls: &ClassicalAdjoints,
) -> Result<()> {
    let n = cls.n;
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string(), "path_id".to_string()];
    header.extend(names("frak_p", n));
    header.push("frak_q".into());
    header.extend(names("p", n));
    header.extend(names("q", n));
    header.extend(names("P", n * n));
    header.extend(names("Q", n * n));
    header.push("chi".into());
    w.write_record(&header)?;
    let steps = fwd.grid.n_steps;
    for p in 0..fwd.n_paths() {
        for s in 0..=steps {
            let mut rec = vec![fmt(fwd.grid.time(s)), p.to_string()];
            rec.extend(sing.frak_p.get(s, p).iter().map(|v| fmt(*v)));
            rec.push(fmt(sing.frak_q.scalar(s, p)));
            rec.extend(cls.p.get(s, p).iter().map(|v| fmt(*v)));
            if s < steps {
                rec.extend(cls.q.get(s, p).iter().map(|v| fmt(*v)));
            } else {
                rec.extend(std::iter::repeat_n(String::new(), n));
            }
            rec.extend(cls.big_p.get(s, p).iter().map(|v| fmt(*v)));
            if s < steps {
                rec.extend(cls.big_q.get(s, p).iter().map(|v| fmt(*v)));
            } else {
                rec.extend(std::iter::repeat_n(String::new(), n * n));
            }
            rec.push(fmt(cls.chi.scalar(s, p)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `level,norm_name,value` rows of a convergence study.
pub fn write_study_csv(path: &Path, study: &StudyResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["level", "norm_name", "value"])?;
    for r in &study.records {
        w.write_record([fmt(r.level), r.norm_name.clone(), fmt(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// `t,x,v,mask,u_star..` for every grid cell.
pub fn write_value_grid_csv(path: &Path, vg: &ValueGrid) -> Result<()> {
    let k = vg.u_star.first().and_then(|r| r.first()).map_or(1, |u| u.len());
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string(), "x".to_string(), "v".to_string(), "mask".to_string()];
    header.extend(names("u_star", k));
    w.write_record(&header)?;
    for (s, row) in vg.v.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            let mut rec = vec![fmt(vg.grid.time(s)), fmt(vg.space.x(i)), fmt(*v), vg.mask(s, i).to_string()];
            rec.extend(vg.u_star[s][i].iter().map(|u| fmt(*u)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `s,t,c..` rows of a kernel estimate (component 0), times in grid units of `dt`.
pub fn write_kernel_csv(path: &Path, kernel: &KernelEstimate, dt: f64) -> Result<()> {
    let width = kernel.bases.iter().map(|b| b.len()).max().unwrap_or(1);
    let mut w = writer(path)?;
    let mut header = vec!["s".to_string(), "t".to_string()];
    header.extend((0..width).map(|j| format!("c{j}")));
    w.write_record(&header)?;
    for e in kernel.entries.values() {
        let mut rec = vec![fmt(e.s as f64 * dt), fmt(e.t as f64 * dt)];
        let c = &e.coefficients[0];
        rec.extend((0..width).map(|j| c.get(j).map_or(String::new(), |v| fmt(*v))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `condition,t,min_margin,residual` rows for every per-time diagnostic.
pub fn write_condition_csv(path: &Path, reports: &[ConditionReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["condition", "t", "min_margin", "residual"])?;
    for r in reports {
        for d in &r.per_time {
            w.write_record([r.name.clone(), fmt(d.t), fmt(d.min_margin), fmt(d.residual)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush().map_err(FbsdeError::from)
}
