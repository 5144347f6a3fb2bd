use std::path::Path;

use crate::baselines::{Criterion, FILL_CRITERION};
use crate::error::{LobsError, Result};
use crate::io::{self, HessianDump};
use crate::net::Network;
use crate::pruner::{apply_obs_update, DecisionLog};

/// Re-applies a single-stage decision log to the model it was recorded against.
///
/// L-OBS rows need the `Ψ^{-1}` dump written with the log; the result is
/// bit-identical to the pruned model saved by the original run.
pub fn replay(log: &DecisionLog, original: &Network, hessian: Option<&HessianDump>) -> Result<Network> {
    let hash = io::network_sha256(original);
    if hash != log.base_sha256 {
        return Err(LobsError::Replay(format!(
            "base model hash {hash} does not match the log's {}",
            log.base_sha256
        )));
    }
    let mut net = original.clone();
    for (i, r) in log.records.iter().enumerate() {
        let fail = |m: String| LobsError::Replay(format!("record {i}: {m}"));
        if r.stage != 0 {
            return Err(fail("stages after retraining cannot be replayed".into()));
        }
        if r.layer >= net.num_layers() {
            return Err(fail(format!("layer {} does not exist", r.layer)));
        }
        let layer = net.layer_mut(r.layer);
        if r.q >= layer.param_count() || layer.position(r.q) != (r.row, r.col) {
            return Err(fail(format!("index {} ({}, {}) does not fit the layer", r.q, r.row, r.col)));
        }
        if !layer.mask()[[r.row, r.col]] {
            return Err(fail(format!("parameter {} is already pruned", r.q)));
        }
        let theta = layer.weights()[[r.row, r.col]];
        if theta.to_bits() != r.theta.to_bits() {
            return Err(fail(format!("weight is {theta:e}, log expects {:e}", r.theta)));
        }
        if r.criterion == Criterion::Lobs.name() {
            let pinv = hessian
                .and_then(|h| h.inverse(r.layer))
                .ok_or_else(|| fail(format!("no Ψ^-1 for layer {} in the Hessian dump", r.layer)))?;
            apply_obs_update(layer, r.q, pinv)?;
        } else if r.criterion == FILL_CRITERION || Criterion::parse(&r.criterion, 0).is_ok() {
            layer.prune_entry(r.row, r.col);
        } else {
            return Err(fail(format!("unknown criterion `{}`", r.criterion)));
        }
    }
    Ok(net)
}

/// [`replay`] over files; `hessian` may be omitted for baseline logs.
pub fn replay_files(log: &Path, model: &Path, hessian: Option<&Path>, out: &Path) -> Result<Network> {
    let log = DecisionLog::load(log)?;
    let original = io::load_network(model)?;
    let dump = hessian.map(io::load_hessian).transpose()?;
    let net = replay(&log, &original, dump.as_ref())?;
    io::save_network(&net, out)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{load_data, obtain_model, prune_single_stage, ExperimentConfig};

    fn setup(criterion: &str) -> (Network, super::super::Pruned) {
        let cfg = ExperimentConfig::from_toml(&format!(
            r#"
[data]
source = "synthetic"
probe_size = 100
[data.synthetic]
dim = 5
train = 300
test = 100
[model]
input = [1, 1, 5]
layers = [{{ kind = "dense", units = 8 }}, {{ kind = "dense", units = 4 }}]
[train]
iterations = 100
[prune]
criterion = "{criterion}"
layer_ratios = [0.4, 0.6]
batch_size_per_recompute = 7
"#
        ))
        .unwrap();
        let data = load_data(&cfg.data).unwrap();
        let net = obtain_model(&cfg, &data).unwrap();
        let pruned = prune_single_stage(&cfg, &net, &data).unwrap();
        (net, pruned)
    }

    #[test]
    fn full_and_prefix_replay() {
        let (net, pruned) = setup("lobs");
        let got = replay(&pruned.log, &net, Some(&pruned.hessian)).unwrap();
        assert_eq!(io::network_to_bytes(&got), io::network_to_bytes(&pruned.net));
        let half = pruned.log.prefix(pruned.log.records.len() / 2);
        let mid = replay(&half, &net, Some(&pruned.hessian)).unwrap();
        assert_eq!(mid.compression_ratio(), half.records.last().unwrap().cumulative_cr);
        let empty = replay(&pruned.log.prefix(0), &net, None).unwrap();
        assert_eq!(io::network_to_bytes(&empty), io::network_to_bytes(&net));
    }

    #[test]
    fn baseline_replay_needs_no_hessian() {
        let (net, pruned) = setup("magnitude");
        let got = replay(&pruned.log, &net, None).unwrap();
        assert_eq!(io::network_to_bytes(&got), io::network_to_bytes(&pruned.net));
    }

    #[test]
    fn wrong_base_model() {
        let (net, pruned) = setup("lobs");
        let mut other = net.clone();
        other.layer_mut(0).prune_entry(0, 0);
        assert!(matches!(replay(&pruned.log, &other, Some(&pruned.hessian)), Err(LobsError::Replay(_))));
        assert!(matches!(replay(&pruned.log, &net, None), Err(LobsError::Replay(_))));
    }
}
