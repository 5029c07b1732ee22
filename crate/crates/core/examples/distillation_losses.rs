//! Teacher-student losses on a three-class sample: classical KD and its
//! target/non-target split, NKD at two values of gamma, and DKD.
//!
//! cargo run --example distillation_losses

use nkd::kd::{dkd_loss, kd_decomposed, kd_loss, nkd_loss_parts, DkdConfig, KdConfig};
use nkd::numkit::{LogitVector, ProbVector};

fn main() -> nkd::Result<()> {
    let teacher = ProbVector::new(vec![0.7, 0.2, 0.1])?;
    let student = ProbVector::new(vec![0.5, 0.3, 0.2])?;
    let logits = LogitVector::new(student.as_slice().iter().map(|p| p.ln()).collect())?;
    let target = 0;

    let kd = kd_loss(&teacher, &student)?;
    let (t, nt) = kd_decomposed(&teacher, &student, target)?;
    println!("kd       {:.6}  = target {t:.6} + non-target {nt:.6}", kd.value);

    for gamma in [1.0, 1.5] {
        let cfg = KdConfig { gamma, ..KdConfig::default() };
        let (r, parts) = nkd_loss_parts(&teacher, &student, &logits, target, &cfg)?;
        println!(
            "nkd g={gamma}  {:.6}  (target {:.6}, normalized non-target ce {:.6})",
            r.value, parts.target, parts.nontarget
        );
        println!("         d/dz = {:?}", r.grad_student_logits);
    }

    let dkd = dkd_loss(&teacher, &student, target, &DkdConfig { alpha_dkd: 1.0, beta_dkd: 0.3 })?;
    println!("dkd a=1 b=0.3  {:.6}", dkd.value);
    Ok(())
}
