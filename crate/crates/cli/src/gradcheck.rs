use std::fs;

use anyhow::Context as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use intentr::ingest::Label;
use intentr::model::{Model, ModelConfig};
use intentr::nn::gradcheck::grad_check_gradients;
use intentr::transform::{Batch, EncodedSession};
use intentr::vocab::FieldLayout;

use crate::args::GradcheckArgs;
use crate::manifest::Context;
use crate::{Failed, Usage, EXIT_GRADCHECK_FAILED};

const ROWS: [usize; 5] = [7, 3, 4, 3, 3];
const LENGTHS: [usize; 4] = [1, 2, 5, 2];

fn probe_batch(seed: u64) -> anyhow::Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let sessions: Vec<EncodedSession> = LENGTHS
        .iter()
        .enumerate()
        .map(|(i, &len)| EncodedSession {
            session_id: i as u64 + 1,
            label: if i % 2 == 0 { Label::Buyer } else { Label::Clicker },
            events: (0..len).map(|_| ROWS.iter().map(|&r| rng.random_range(0..r as u32)).collect()).collect(),
            original_len: len,
            unrolled_len: len,
            max_price: None,
        })
        .collect();
    let refs: Vec<&EncodedSession> = sessions.iter().collect();
    Ok(Batch::from_sessions(&refs)?)
}

/// Checks backpropagation on a small double-precision model against
/// central differences of the batch loss.
pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = ModelConfig::new(a.cell, a.layers, a.hidden);
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    if !(a.tolerance > 0.0) {
        return Err(Usage("--tolerance must be positive".into()).into());
    }
    let model = Model::<f64>::seeded(cfg, FieldLayout::with_widths([4, 2, 2, 2, 2]), &ROWS, a.seed)?;
    let batch = probe_batch(a.seed)?;
    let mut manifest = match &a.report {
        Some(dir) => Some(ctx.start("gradcheck", dir, &a, Some(a.seed), &[])?),
        None => None,
    };
    let r = (|| -> anyhow::Result<bool> {
        let mut tape = model.forward_tape(&batch)?;
        let mut grads = tape.backward(&model, &batch)?;
        if a.corrupt {
            grads.head_bias[0] += 0.05;
        }
        let report = grad_check_gradients(&model, &batch, &grads, a.tolerance)?;
        print!("{}", report.render());
        if let (Some(dir), Some(m)) = (&a.report, manifest.as_mut()) {
            let p = dir.join("gradcheck.json");
            fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", p.display()))?;
            m.output(&p)?;
        }
        Ok(report.passed)
    })();
    let passed = match manifest {
        Some(m) => m.conclude(r)?,
        None => r?,
    };
    if passed {
        Ok(())
    } else {
        Err(Failed(EXIT_GRADCHECK_FAILED).into())
    }
}
