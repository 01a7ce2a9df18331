//! Flat `key=value` configuration files. One assignment per line; `#`
//! starts a comment; unknown keys are rejected.

use std::str::FromStr;

use crate::train::TrainConfig;

use super::synth::SynthSpec;
use super::IoError;

fn entries(text: &str) -> Result<Vec<(usize, String, String)>, IoError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(IoError::Malformed {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, IoError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| IoError::Malformed {
        line,
        message: format!("bad value for {key}: {e}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>, IoError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|s| parse::<T>(line, key, s.trim()))
        .collect()
}

/// Parse a training config; unspecified keys keep their defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig, IoError> {
    let mut cfg = TrainConfig::default();
    for (line, key, value) in entries(text)? {
        match key.as_str() {
            "variant" => cfg.variant = parse(line, &key, &value)?,
            "experts" => cfg.experts = parse(line, &key, &value)?,
            "lambda" => cfg.lambda = parse(line, &key, &value)?,
            "tau" => cfg.tau = parse(line, &key, &value)?,
            "backbone" => cfg.backbone = parse(line, &key, &value)?,
            "hidden" => cfg.hidden = parse(line, &key, &value)?,
            "layers" => cfg.layers = parse(line, &key, &value)?,
            "epochs" => cfg.epochs = parse(line, &key, &value)?,
            "batch_size" => cfg.batch_size = parse(line, &key, &value)?,
            "lr" => cfg.lr = parse(line, &key, &value)?,
            "seed" => cfg.seed = parse(line, &key, &value)?,
            "gate_mode" => cfg.gate_mode = parse(line, &key, &value)?,
            "focal_gamma" => cfg.focal_gamma = parse(line, &key, &value)?,
            "cosine_gate" => cfg.cosine_gate = parse(line, &key, &value)?,
            "gate_bias" => cfg.gate_bias = parse(line, &key, &value)?,
            "grid_m" => cfg.grid_m = parse_list(line, &key, &value)?,
            "grid_lambda" => cfg.grid_lambda = parse_list(line, &key, &value)?,
            other => {
                return Err(IoError::BadConfig(format!(
                    "unknown key {other:?} on line {line}"
                )))
            }
        }
    }
    Ok(cfg)
}

/// Render a config in the same flat format `parse_train_config` accepts.
pub fn render_train_config(cfg: &TrainConfig) -> String {
    let grid_m = cfg
        .grid_m
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let grid_lambda = cfg
        .grid_lambda
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let gate_mode = match cfg.gate_mode {
        crate::moe::GateMode::SingleTask => "single_task",
        crate::moe::GateMode::Shared => "shared",
        crate::moe::GateMode::Individual => "individual",
    };
    let backbone = match cfg.backbone {
        crate::gnn::BackboneKind::Gcn => "gcn",
        crate::gnn::BackboneKind::Gin => "gin",
    };
    format!(
        "variant={}\nexperts={}\nlambda={}\ntau={}\nbackbone={}\nhidden={}\nlayers={}\nepochs={}\nbatch_size={}\nlr={}\nseed={}\ngate_mode={}\nfocal_gamma={}\ncosine_gate={}\ngate_bias={}\ngrid_m={}\ngrid_lambda={}\n",
        cfg.variant,
        cfg.experts,
        cfg.lambda,
        cfg.tau,
        backbone,
        cfg.hidden,
        cfg.layers,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        cfg.seed,
        gate_mode,
        cfg.focal_gamma,
        cfg.cosine_gate,
        cfg.gate_bias,
        grid_m,
        grid_lambda,
    )
}

/// Parse a synthetic-benchmark spec.
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec, IoError> {
    let mut spec = SynthSpec::default();
    for (line, key, value) in entries(text)? {
        match key.as_str() {
            "n" => spec.n = parse(line, &key, &value)?,
            "positive_ratio" => spec.positive_ratio = parse(line, &key, &value)?,
            "node_min" => spec.node_min = parse(line, &key, &value)?,
            "node_max" => spec.node_max = parse(line, &key, &value)?,
            "noise_sigma" => spec.noise_sigma = parse(line, &key, &value)?,
            "diversity" => spec.diversity = parse(line, &key, &value)?,
            "seed" => spec.seed = parse(line, &key, &value)?,
            other => {
                return Err(IoError::BadConfig(format!(
                    "unknown key {other:?} on line {line}"
                )))
            }
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::BackboneKind;
    use crate::train::Variant;

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = parse_train_config(
            "variant=post\nexperts=4 # four experts\nlambda=0.01\n\n# blank above\nbackbone=gin\ngrid_m=2,3,4\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::Post);
        assert_eq!(cfg.experts, 4);
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!(cfg.backbone, BackboneKind::Gin);
        assert_eq!(cfg.grid_m, vec![2, 3, 4]);
        // Untouched keys keep defaults.
        assert_eq!(cfg.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            parse_train_config("velocity=9\n"),
            Err(IoError::BadConfig(_))
        ));
    }

    #[test]
    fn bad_values_name_the_line() {
        match parse_train_config("variant=pri\nepochs=ten\n") {
            Err(IoError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn render_parse_roundtrip() {
        let cfg = TrainConfig {
            variant: Variant::MeanMix,
            experts: 6,
            lambda: 0.001,
            grid_m: vec![2, 8],
            grid_lambda: vec![0.1, 1.0],
            ..TrainConfig::default()
        };
        let parsed = parse_train_config(&render_train_config(&cfg)).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn synth_spec_parses() {
        let spec =
            parse_synth_spec("n=500\npositive_ratio=0.1\nnoise_sigma=0.25\ndiversity=0.4\nseed=9\n")
                .unwrap();
        assert_eq!(spec.n, 500);
        assert_eq!(spec.positive_ratio, 0.1);
        assert_eq!(spec.seed, 9);
    }
}
