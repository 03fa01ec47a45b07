//! Experiment plans for the ablation runner: a shared base config plus named
//! runs with per-run overrides. Plans come from a file or from the builtin
//! generators (regime×loss×query matrix, query-format sweep, prompt-count and
//! prompt-depth sweeps).

use anyhow::{bail, Context, Result};
use zegseg_core::trainer::TrainConfig;
use zegseg_core::QueryFormat;

#[derive(Debug, Clone)]
pub struct PlanRun {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub runs: Vec<PlanRun>,
}

impl ExperimentPlan {
    /// Parse a plan file: base key=value lines apply to every run; each
    /// `[run <name>]` section then overrides per run. Every config validates
    /// before anything executes, and names must be unique.
    pub fn parse(text: &str, base: &TrainConfig) -> Result<ExperimentPlan> {
        let mut base = base.clone();
        let mut runs: Vec<(String, Vec<(String, String)>)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix('[') {
                let header = header
                    .strip_suffix(']')
                    .with_context(|| format!("line {}: unterminated section", ln + 1))?;
                let name = header
                    .strip_prefix("run")
                    .with_context(|| format!("line {}: expected [run <name>]", ln + 1))?
                    .trim();
                if name.is_empty() {
                    bail!("line {}: run needs a name", ln + 1);
                }
                runs.push((name.to_string(), Vec::new()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value", ln + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            match runs.last_mut() {
                Some((_, overrides)) => overrides.push((k, v)),
                None => base
                    .apply_kv(&k, &v)
                    .with_context(|| format!("line {}", ln + 1))?,
            }
        }
        if runs.is_empty() {
            bail!("plan contains no [run ...] sections");
        }
        let mut out = Vec::with_capacity(runs.len());
        for (name, overrides) in runs {
            if out.iter().any(|r: &PlanRun| r.name == name) {
                bail!("duplicate run name `{name}`");
            }
            let mut cfg = base.clone();
            for (k, v) in overrides {
                cfg.apply_kv(&k, &v)
                    .with_context(|| format!("run `{name}`"))?;
            }
            cfg.validate()
                .map_err(|e| anyhow::anyhow!("run `{name}`: {e}"))?;
            out.push(PlanRun { name, config: cfg });
        }
        Ok(ExperimentPlan { runs: out })
    }

    /// The regime × design matrix: {fix, ft, dpt} × {base, +NEL, +RD,
    /// +NEL+RD}. Twelve rows; the last is the full model.
    pub fn builtin_design_matrix(base: &TrainConfig) -> Result<ExperimentPlan> {
        let mut text = String::new();
        for regime in ["fix", "ft", "dpt"] {
            let base_name = format!("baseline-{regime}");
            for (suffix, loss, fmt) in [
                ("", "el", "t"),
                ("+nel", "nel-plus", "t"),
                ("+rd", "el", "cat-tg-t"),
                ("+nel+rd", "nel-plus", "cat-tg-t"),
            ] {
                text.push_str(&format!(
                    "[run {base_name}{suffix}]\nregime={regime}\nloss={loss}\nquery-format={fmt}\n"
                ));
            }
        }
        Self::parse(&text, base)
    }

    /// All twelve query formats under the full model's regime and loss.
    pub fn builtin_query_formats(base: &TrainConfig) -> Result<ExperimentPlan> {
        let mut text = String::new();
        for fmt in QueryFormat::ALL {
            text.push_str(&format!(
                "[run format-{name}]\nregime=dpt\nloss=nel-plus\nquery-format={name}\n",
                name = fmt.name()
            ));
        }
        Self::parse(&text, base)
    }

    /// Prompt-token count sweep on the full model.
    pub fn builtin_prompt_count(base: &TrainConfig) -> Result<ExperimentPlan> {
        let mut text = String::new();
        for m in [1usize, 5, 10, 20, 40] {
            text.push_str(&format!(
                "[run tokens-{m}]\nregime=dpt\nloss=nel-plus\nquery-format=cat-tg-t\nprompt-tokens={m}\n"
            ));
        }
        Self::parse(&text, base)
    }

    /// Prompt depth/placement sweep: bottom-up prefixes and top-down suffixes
    /// of the layer range.
    pub fn builtin_prompt_depth(base: &TrainConfig) -> Result<ExperimentPlan> {
        let depth = base.depth;
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        let mut ends: Vec<usize> = vec![1];
        let mut e = 1;
        while e < depth {
            e = (e * 2).min(depth);
            ends.push(e);
        }
        for &end in &ends {
            ranges.push((1, end));
        }
        let mut starts: Vec<usize> = ends.iter().map(|&x| depth + 1 - x).collect();
        starts.sort_unstable();
        starts.dedup();
        for &start in &starts {
            if start > 1 {
                ranges.push((start, depth));
            }
        }
        let mut text = String::new();
        for (a, b) in ranges {
            text.push_str(&format!(
                "[run layers-{a}-{b}]\nregime=dpt\nloss=nel-plus\nquery-format=cat-tg-t\nprompt-layers={a}..{b}\n"
            ));
        }
        Self::parse(&text, base)
    }

    pub fn builtin(name: &str, base: &TrainConfig) -> Result<ExperimentPlan> {
        match name {
            "table4" | "design-matrix" => Self::builtin_design_matrix(base),
            "table5" | "query-formats" => Self::builtin_query_formats(base),
            "prompt-count" => Self::builtin_prompt_count(base),
            "prompt-depth" => Self::builtin_prompt_depth(base),
            other => bail!(
                "unknown builtin plan `{other}` (have: design-matrix, query-formats, prompt-count, prompt-depth)"
            ),
        }
    }
}
