//! Teacher-free labels for a batch of four: soft target weights that keep
//! the batch mean of the hard labels, non-target classes ranked by the weak
//! and final heads, and Zipf values dealt in rank order.
//!
//! cargo run --example soft_labels

use nkd::uskd::{build_soft_labels, uskd_total_loss, UskdConfig, UskdSampleState};

fn main() -> nkd::Result<()> {
    let student = vec![
        vec![2.5, 0.3, -0.4, 1.1, -1.0],
        vec![0.1, 1.9, 0.8, -0.5, 0.0],
        vec![-0.2, 0.4, 0.6, 0.2, -0.9],
        vec![1.0, -1.2, 0.3, 0.4, 2.2],
    ];
    let weak = vec![
        vec![1.0, 0.5, 0.2, 0.9, -0.3],
        vec![0.3, 0.7, 0.6, -0.1, 0.2],
        vec![0.0, 0.1, 0.3, 0.5, -0.4],
        vec![0.2, -0.6, 0.1, 0.6, 0.9],
    ];
    let targets = [0, 1, 2, 4];
    let v_t = [1.0; 4];
    let cfg = UskdConfig::default();

    let labels = build_soft_labels(&student, &weak, &targets, &v_t, &cfg, None)?;
    let mean_p: f64 = labels.iter().map(|l| l.p_target).sum::<f64>() / 4.0;
    println!("mean P_t = {mean_p:.15} (mean V_t = 1)");
    for (n, l) in labels.iter().enumerate() {
        let z: Vec<String> = l.z_nontarget.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "sample {n} target {}: P_t {:.4}  rank {:?}  Z [{}]",
            targets[n],
            l.p_target,
            l.rank_order,
            z.join(", ")
        );
    }

    let state = UskdSampleState {
        student_logits: &student[0],
        weak_logits: &weak[0],
        target: targets[0],
        v_t: 1.0,
        labels: &labels[0],
    };
    let loss = uskd_total_loss(&state, &cfg)?;
    let c = loss.components;
    println!(
        "sample 0: total {:.6} = ori {:.6} + {}*target {:.6} + {}*non {:.6} + weak {:.6}",
        loss.value(),
        c.l_ori,
        cfg.alpha,
        c.l_target,
        cfg.beta,
        c.l_non,
        c.l_weak
    );
    Ok(())
}
