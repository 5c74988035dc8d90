//! Subcommand implementations. Each returns the JSON payload for --json
//! plus human-readable lines; writes honor --dry-run.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use stylevec_core::analysis::{
    direction_consistency, linearity_probe, per_layer_stats, perturb, PerturbationSpec,
    TargetSelector,
};
use stylevec_core::checkpoint::{
    read_checkpoint, validate_header, write_checkpoint, Checkpoint, TensorKey,
};
use stylevec_core::fixtures::{
    default_topology, gen_base, gen_styled_variant, infer_n_blocks, FixtureDims, FixtureSpec,
    VariantTarget,
};
use stylevec_core::lora::{matrix_view, LoraAdapter};
use stylevec_core::merge::{
    compile_recipe, execute_plan, MergeRecipe, ModelTopology, TopologySpec,
};
use stylevec_core::taskvector::{
    apply_evector, build_task_vector, combine_linear, scale_emotion_vector, scale_task_vector,
    EVector, KeyAlignmentPolicy, TaskVector,
};
use stylevec_core::{apply_lora, extract_lora, rank_targets_by_variation};

use crate::args::*;
use crate::error::CliError;

pub struct CommandOutput {
    pub json: Value,
    pub human: Vec<String>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn parse_keys(raw: &[String]) -> Result<Vec<TensorKey>, CliError> {
    raw.iter()
        .map(|s| TensorKey::new(s.clone()).map_err(|e| CliError::Validation(e.to_string())))
        .collect()
}

fn load_vector(path: &Path) -> Result<TaskVector, CliError> {
    let ckpt = read_checkpoint(path)?;
    let mut vector = TaskVector::from_checkpoint(&ckpt)?;
    if vector.provenance().finetuned_id.is_empty() {
        let base_id = vector.provenance().base_id.clone();
        vector.set_ids(base_id, stem(path));
    }
    Ok(vector)
}

fn load_topology(path: Option<&PathBuf>) -> Result<Option<ModelTopology>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let spec: TopologySpec = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("invalid topology JSON: {e}")))?;
            Ok(Some(spec.build()?))
        }
    }
}

/// Writes unless dry-run; reports what happened either way.
fn write_or_plan(dry_run: bool, path: &Path, ckpt: &Checkpoint) -> Result<Value, CliError> {
    if !dry_run {
        write_checkpoint(ckpt, path)?;
    }
    Ok(json!({
        "path": path.display().to_string(),
        "tensors": ckpt.len(),
        "parameters": ckpt.total_params(),
        "written": !dry_run,
    }))
}

fn scale_vector(
    vector: TaskVector,
    coefficient: f64,
    emotion: bool,
    beta_max: f64,
) -> Result<EVector, CliError> {
    if emotion {
        Ok(scale_emotion_vector(vector, coefficient, beta_max)?)
    } else {
        Ok(scale_task_vector(vector, coefficient)?)
    }
}

pub fn diff(args: &DiffArgs) -> Result<CommandOutput, CliError> {
    let finetuned = read_checkpoint(&args.finetuned)?;
    let base = read_checkpoint(&args.base)?;
    let policy = match args.policy {
        PolicyArg::Strict => KeyAlignmentPolicy::Strict,
        PolicyArg::Intersect => KeyAlignmentPolicy::Intersect,
    };
    let (mut tau, report) = build_task_vector(&finetuned, &base, policy)?;
    tau.set_ids(
        args.base_id.clone().unwrap_or_else(|| stem(&args.base)),
        args.finetuned_id
            .clone()
            .unwrap_or_else(|| stem(&args.finetuned)),
    );
    let out = write_or_plan(args.dry_run, &args.out, &tau.to_checkpoint())?;
    let mut human = vec![format!(
        "task vector: {} keys ({} skipped by alignment)",
        tau.len(),
        report.skipped.len()
    )];
    for (key, reason) in report.skipped.iter().take(10) {
        human.push(format!("  skipped {key}: {reason:?}"));
    }
    human.push(describe_write(&out));
    Ok(CommandOutput {
        json: json!({
            "keys": tau.len(),
            "alignment": policy.name(),
            "skipped": report.skipped,
            "output": out,
        }),
        human,
    })
}

pub fn apply(args: &ApplyArgs) -> Result<CommandOutput, CliError> {
    let base = read_checkpoint(&args.base)?;
    let vector = load_vector(&args.vector)?;
    let eps = scale_vector(vector, args.alpha, args.emotion, args.beta_max)?;
    let result = apply_evector(&base, &eps)?;
    let out = write_or_plan(args.dry_run, &args.out, &result)?;
    Ok(CommandOutput {
        json: json!({
            "alpha": args.alpha,
            "vector_keys": eps.vector().len(),
            "output": out,
        }),
        human: vec![
            format!(
                "applied {} keys at coefficient {}",
                eps.vector().len(),
                args.alpha
            ),
            describe_write(&out),
        ],
    })
}

pub fn scale(args: &ScaleArgs) -> Result<CommandOutput, CliError> {
    let vector = load_vector(&args.vector)?;
    let source_id = vector.provenance().finetuned_id.clone();
    let base_id = vector.provenance().base_id.clone();
    let eps = scale_vector(vector, args.coeff, args.emotion, args.beta_max)?;
    let mut scaled = combine_linear(std::slice::from_ref(&eps))?;
    scaled.set_ids(base_id, format!("{source_id}*{}", args.coeff));
    let mut ckpt = scaled.to_checkpoint();
    ckpt.set_metadata("stylevec.scale.coefficient", args.coeff.to_string());
    let out = write_or_plan(args.dry_run, &args.out, &ckpt)?;
    Ok(CommandOutput {
        json: json!({
            "coefficient": args.coeff,
            "keys": scaled.len(),
            "output": out,
        }),
        human: vec![
            format!("scaled {} keys by {}", scaled.len(), args.coeff),
            describe_write(&out),
        ],
    })
}

pub fn merge(args: &MergeArgs) -> Result<CommandOutput, CliError> {
    let recipe = MergeRecipe::from_file(&args.recipe)?;
    let plan = compile_recipe(&recipe)?;
    let mut human = vec![format!(
        "plan: {:?} merge of {} input(s) onto {} ({} keys, {} untouched)",
        plan.strategy,
        recipe.inputs.len(),
        plan.base.display(),
        plan.base_keys,
        plan.untouched_keys,
    )];
    if let Some(counts) = &plan.class_counts {
        let parts: Vec<String> = counts.iter().map(|(c, n)| format!("{c}={n}")).collect();
        human.push(format!("  classes: {}", parts.join(" ")));
    }
    if !plan.dropped.is_empty() {
        human.push(format!(
            "  {} key(s) dropped as out-of-class for their role",
            plan.dropped.len()
        ));
    }
    let plan_json = serde_json::to_value(&plan).expect("plan serializes");
    if args.dry_run {
        human.push("dry run: nothing written".to_string());
        return Ok(CommandOutput {
            json: json!({ "plan": plan_json, "output": Value::Null }),
            human,
        });
    }
    let merged = execute_plan(&plan)?;
    let out = write_or_plan(false, &recipe.output, &merged)?;
    human.push(describe_write(&out));
    Ok(CommandOutput {
        json: json!({ "plan": plan_json, "output": out }),
        human,
    })
}

pub fn lora_extract(args: &LoraExtractArgs) -> Result<CommandOutput, CliError> {
    let vector = load_vector(&args.vector)?;
    let targets: Vec<TensorKey> = if let Some(top) = args.top {
        let base = read_checkpoint(args.base.as_ref().expect("clap enforces --base"))?;
        rank_targets_by_variation(&vector, &base)?
            .into_iter()
            .filter(|(key, _)| {
                vector
                    .get(key)
                    .map(|t| matrix_view(key, t.shape()).is_ok())
                    .unwrap_or(false)
            })
            .take(top)
            .map(|(key, _)| key)
            .collect()
    } else if !args.targets.is_empty() {
        parse_keys(&args.targets)?
    } else {
        return Err(CliError::Validation(
            "provide --targets or --top with --base".into(),
        ));
    };
    if targets.is_empty() {
        return Err(CliError::Validation("no adapter targets selected".into()));
    }
    let adapter = extract_lora(&vector, args.rank, &targets)?;
    let out = write_or_plan(args.dry_run, &args.out, &adapter.to_checkpoint())?;
    Ok(CommandOutput {
        json: json!({
            "rank": args.rank.get(),
            "targets": targets.iter().map(|k| k.as_str()).collect::<Vec<_>>(),
            "output": out,
        }),
        human: vec![
            format!(
                "extracted rank-{} adapter for {} target(s)",
                args.rank,
                targets.len()
            ),
            describe_write(&out),
        ],
    })
}

pub fn lora_apply(args: &LoraApplyArgs) -> Result<CommandOutput, CliError> {
    let base = read_checkpoint(&args.base)?;
    let ckpt = read_checkpoint(&args.adapter)?;
    let adapter = LoraAdapter::from_checkpoint(&ckpt)?;
    let result = apply_lora(&base, &adapter, args.alpha)?;
    let out = write_or_plan(args.dry_run, &args.out, &result)?;
    Ok(CommandOutput {
        json: json!({
            "alpha": args.alpha,
            "effective_scale": args.alpha * args.alpha,
            "targets": adapter.len(),
            "output": out,
        }),
        human: vec![
            format!(
                "applied {} adapter target(s) at alpha={} (scale {})",
                adapter.len(),
                args.alpha,
                args.alpha * args.alpha
            ),
            describe_write(&out),
        ],
    })
}

pub fn inspect(args: &InspectArgs) -> Result<CommandOutput, CliError> {
    let bytes = std::fs::read(&args.file)?;
    let report = validate_header(&bytes)?;
    let mut human = vec![format!(
        "{}: {} tensor(s), {} header bytes, {} data bytes, {}",
        args.file.display(),
        report.tensor_count,
        report.header_bytes,
        report.data_bytes,
        if report.is_canonical() {
            "canonical layout".to_string()
        } else {
            format!("{} layout violation(s)", report.violations.len())
        }
    )];
    for v in &report.violations {
        human.push(format!("  violation: {v:?}"));
    }
    for (k, v) in &report.metadata {
        human.push(format!("  metadata {k} = {v}"));
    }
    for entry in report.entries.iter().take(40) {
        human.push(format!("  {} {} {:?}", entry.key, entry.dtype, entry.shape));
    }
    if report.entries.len() > 40 {
        human.push(format!("  ... {} more", report.entries.len() - 40));
    }

    let stats = match &args.base {
        None => None,
        Some(base_path) => {
            let vector = load_vector(&args.file)?;
            let base = read_checkpoint(base_path)?;
            let topology = match load_topology(args.topology.as_ref())? {
                Some(t) => Some(t),
                None => {
                    let blocks = infer_n_blocks(&base);
                    (blocks > 0).then(|| default_topology(blocks))
                }
            };
            let stats = per_layer_stats(&vector, &base, topology.as_ref())?;
            human.push(format!(
                "variation stats over {} key(s), {} parameter(s):",
                stats.per_key.len(),
                stats.total_elements
            ));
            for s in &stats.per_key {
                human.push(format!(
                    "  {}  abs={:.6e} rel={:.6e}",
                    s.key, s.absolute_norm, s.relative_norm
                ));
            }
            if let Some(groups) = &stats.groups {
                for g in groups {
                    human.push(format!(
                        "  [{}] keys={} abs={:.6e} rel={:.6e}",
                        g.class, g.keys, g.absolute_norm, g.relative_norm
                    ));
                }
            }
            Some(stats)
        }
    };

    Ok(CommandOutput {
        json: json!({
            "header": serde_json::to_value(&report).expect("report serializes"),
            "stats": stats.map(|s| serde_json::to_value(&s).expect("stats serialize")),
        }),
        human,
    })
}

pub fn cosine(args: &CosineArgs) -> Result<CommandOutput, CliError> {
    let vectors: Vec<TaskVector> = args
        .vectors
        .iter()
        .map(|p| load_vector(p))
        .collect::<Result<_, _>>()?;
    let report = direction_consistency(&vectors, args.per_layer)?;
    let mut human = vec![format!(
        "cosine matrix over {} shared key(s):",
        report.keys_compared
    )];
    for (i, row) in report.cosine.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c {
                Some(v) => format!("{v:+.6}"),
                None => "  undef ".to_string(),
            })
            .collect();
        human.push(format!("  {:<20} {}", report.labels[i], cells.join(" ")));
    }
    Ok(CommandOutput {
        json: serde_json::to_value(&report).expect("report serializes"),
        human,
    })
}

pub fn perturb_cmd(args: &PerturbArgs) -> Result<CommandOutput, CliError> {
    let ckpt = read_checkpoint(&args.file)?;
    let targets = if let Some(class) = args.class {
        let topology = match load_topology(args.topology.as_ref())? {
            Some(t) => t,
            None => default_topology(infer_n_blocks(&ckpt)),
        };
        TargetSelector::Class {
            class: class.to_class(),
            topology,
        }
    } else if !args.keys.is_empty() {
        TargetSelector::Keys(parse_keys(&args.keys)?)
    } else {
        return Err(CliError::Validation("provide --keys or --class".into()));
    };
    let spec = PerturbationSpec {
        targets,
        sigma: args.sigma,
        seed: args.seed,
    };
    let result = perturb(&ckpt, &spec)?;
    let changed = result
        .iter()
        .filter(|(k, t)| ckpt.get(k).map(|o| o != *t).unwrap_or(true))
        .count();
    let out = write_or_plan(args.dry_run, &args.out, &result)?;
    Ok(CommandOutput {
        json: json!({
            "sigma": args.sigma,
            "seed": args.seed,
            "tensors_changed": changed,
            "output": out,
        }),
        human: vec![
            format!(
                "perturbed {changed} tensor(s) with sigma={} seed={}",
                args.sigma, args.seed
            ),
            describe_write(&out),
        ],
    })
}

pub fn linearity(args: &LinearityArgs) -> Result<CommandOutput, CliError> {
    let base = read_checkpoint(&args.base)?;
    let trajectory: Vec<Checkpoint> = args
        .trajectory
        .iter()
        .map(read_checkpoint)
        .collect::<Result<_, _>>()?;
    let report = linearity_probe(&base, &trajectory)?;
    let mut human = vec![format!(
        "linearity over {} steps (final norm {:.6e}):",
        report.steps.len(),
        report.final_norm
    )];
    for step in &report.steps {
        human.push(match (step.cosine, step.relative_residual) {
            (Some(c), Some(r)) => format!(
                "  step {}: cosine {:+.6} residual {:.3e} norm {:.6e}",
                step.step, c, r, step.norm
            ),
            _ => format!("  step {}: zero-norm task vector", step.step),
        });
    }
    Ok(CommandOutput {
        json: serde_json::to_value(&report).expect("report serializes"),
        human,
    })
}

pub fn gen_fixture(args: &GenFixtureArgs) -> Result<CommandOutput, CliError> {
    let spec = FixtureSpec {
        n_blocks: args.n_blocks,
        dims: FixtureDims {
            embed: args.embed,
            hidden: args.hidden,
            heads: args.heads,
        },
        dtype: args.dtype.to_dtype(),
        seed: args.seed,
    };
    let base = gen_base(&spec)?;
    let out = write_or_plan(args.dry_run, &args.out, &base)?;
    let mut human = vec![
        format!(
            "fixture: {} tensor(s), {} parameter(s), {} block(s)",
            base.len(),
            base.total_params(),
            args.n_blocks
        ),
        describe_write(&out),
    ];

    let variant = match &args.variant_out {
        None => None,
        Some(variant_out) => {
            let magnitude = args.magnitude.expect("clap requires --magnitude");
            let (variant, ledger) = gen_styled_variant(
                &base,
                &VariantTarget::Class(args.variant_class.to_class()),
                magnitude,
                args.variant_seed.unwrap_or(args.seed + 1),
                args.style_label.clone(),
            )?;
            let vout = write_or_plan(args.dry_run, variant_out, &variant)?;
            human.push(format!(
                "variant '{}': {} planted key(s) at magnitude {}",
                ledger.style_label,
                ledger.deltas.len(),
                magnitude
            ));
            human.push(describe_write(&vout));
            Some(json!({
                "style_label": ledger.style_label,
                "planted_keys": ledger.keys().map(|k| k.as_str()).collect::<Vec<_>>(),
                "magnitude": magnitude,
                "output": vout,
            }))
        }
    };

    Ok(CommandOutput {
        json: json!({
            "tensors": base.len(),
            "parameters": base.total_params(),
            "n_blocks": args.n_blocks,
            "seed": args.seed,
            "output": out,
            "variant": variant,
        }),
        human,
    })
}

fn describe_write(note: &Value) -> String {
    let path = note["path"].as_str().unwrap_or("?");
    if note["written"].as_bool() == Some(true) {
        format!("wrote {path}")
    } else {
        format!("dry run: would write {path}")
    }
}
