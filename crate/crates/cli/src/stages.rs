//! Pipeline stages: fixture, label, manipulate, judge, score. Stage
//! boundaries are files under the output directory, so every stage is
//! re-runnable and inspectable in isolation.

use cotjudge_core::digest::{sha256_file, Hasher};
use cotjudge_core::judge::{
    generate_keypoints, judge, JudgeMode, JudgeOptions, JudgeResult, ScalingConfig,
    TrajectoryView, Variant, Verdict,
};
use cotjudge_core::manipulation::{
    manipulate, ManipulateOptions, ManipulatedRecord, Strategy,
};
use cotjudge_core::metrics::{
    aggregate_report, plot_rows, write_metrics_csv, write_plot_csv, OriginalOutcome, PairedOutcome,
    ReportOptions,
};
use cotjudge_core::prompts::{ImagePolicy, ImageStore};
use cotjudge_core::provider::{
    CacheOnlyProvider, ChatClient, HttpProvider, MockProvider, MockScript, Provider, ResponseCache,
    RetryPolicy,
};
use cotjudge_core::trajectory::{
    load_dataset, save_dataset, synthesize_fixture, Dataset, GoldLabel, Step, Trajectory,
};
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use crate::config::PipelineConfig;
use crate::manifest::{ExclusionRecord, RunManifest, StageRecord, MANIFEST_FILE};
use crate::CliError;

pub const RESULTS_FILE: &str = "judge_results.jsonl";
pub const LABELED_FILE: &str = "labeled.jsonl";
pub const EXCLUSIONS_FILE: &str = "exclusions.json";

/// Everything a stage needs: resolved config, the output root (redirected
/// during replay), and the provider source.
pub struct StageContext {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    pub strict: bool,
    /// Shared scripted provider when running offline.
    pub mock: Option<Arc<MockProvider>>,
    pub mock_script_path: Option<PathBuf>,
    /// Replay mode: answer only from the cache, with recorded provider ids.
    pub cache_only: Option<BTreeMap<String, crate::manifest::ProviderIdentity>>,
    /// Replay disables manifest writes.
    pub record_manifest: bool,
}

impl StageContext {
    pub fn new(config: PipelineConfig, strict: bool, mock_script: Option<PathBuf>) -> Result<Self, CliError> {
        let mock = match &mock_script {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read mock script {path:?}: {e}")))?;
                let script: MockScript = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("bad mock script {path:?}: {e}")))?;
                Some(Arc::new(
                    MockProvider::from_script(script).map_err(CliError::Config)?,
                ))
            }
            None => None,
        };
        let out_dir = config.out_dir.clone();
        Ok(StageContext {
            config,
            out_dir,
            strict,
            mock,
            mock_script_path: mock_script,
            cache_only: None,
            record_manifest: true,
        })
    }

    fn cache(&self) -> ResponseCache {
        ResponseCache::new(&self.config.cache_dir)
    }

    /// Builds the client for a provider role. Mock scripts shadow every
    /// role; replay uses cache-only providers with the recorded identities.
    pub fn client(&self, role: &str) -> Result<RoleClient, CliError> {
        if let Some(mock) = &self.mock {
            let model = self
                .config
                .providers
                .role(role)
                .map(|c| c.model.clone())
                .unwrap_or_else(|| format!("mock-{role}"));
            let client = ChatClient::new(Arc::clone(mock) as Arc<dyn Provider>).with_cache(self.cache());
            return Ok(RoleClient {
                client,
                model,
                provider_id: "mock".to_string(),
                supports_images: false,
            });
        }
        if let Some(identities) = &self.cache_only {
            let identity = identities.get(role).ok_or_else(|| {
                CliError::Config(format!("manifest records no provider for role {role:?}"))
            })?;
            let client = ChatClient::new(Arc::new(CacheOnlyProvider::new(identity.id.clone())))
                .with_cache(self.cache());
            return Ok(RoleClient {
                client,
                model: identity.model.clone(),
                provider_id: identity.id.clone(),
                supports_images: true,
            });
        }
        let provider_config = self.config.providers.role(role).ok_or_else(|| {
            CliError::Config(format!("no provider configured for role {role:?} (set [providers.{role}] in the config)"))
        })?;
        let api_key = std::env::var(format!("PROVIDER_API_KEY_{}", role.to_uppercase())).ok();
        let provider = HttpProvider::new(provider_config, api_key)
            .map_err(|e| CliError::Config(format!("provider {role}: {e}")))?;
        let provider_id = provider.id().to_string();
        let mut client = ChatClient::new(Arc::new(provider))
            .with_cache(self.cache())
            .with_max_in_flight(provider_config.max_in_flight);
        if let Some(rate) = provider_config.rate_per_minute {
            client = client.with_rate_limit(rate);
        }
        Ok(RoleClient {
            client,
            model: provider_config.model.clone(),
            provider_id,
            supports_images: provider_config.supports_images,
        })
    }

    fn retry_policy(&self) -> RetryPolicy {
        if self.mock.is_some() || self.cache_only.is_some() {
            RetryPolicy::immediate(self.config.retry_max_attempts)
        } else {
            RetryPolicy {
                max_attempts: self.config.retry_max_attempts,
                initial_backoff: Duration::from_millis(self.config.retry_backoff_ms),
                ..RetryPolicy::default()
            }
        }
    }

    fn workers(&self, role: &str) -> usize {
        if self.mock.is_some() {
            4
        } else {
            self.config
                .providers
                .role(role)
                .map(|c| c.max_in_flight)
                .unwrap_or(4)
                .max(1)
        }
    }

    /// The dataset every stage after `label` consumes: the silver-labeled
    /// copy when it exists, else the configured dataset.
    pub fn effective_dataset_path(&self) -> Result<PathBuf, CliError> {
        let labeled = self.out_dir.join(LABELED_FILE);
        if labeled.is_file() {
            return Ok(labeled);
        }
        Ok(self.config.dataset_path()?.to_path_buf())
    }

    pub fn load_effective_dataset(&self) -> Result<(Dataset, PathBuf, PathBuf), CliError> {
        let path = self.effective_dataset_path()?;
        let root = self.config.effective_root(self.config.dataset_path().unwrap_or(&path));
        let dataset = load_dataset(&path, &root)
            .map_err(|e| CliError::Config(format!("loading dataset {path:?}: {e}")))?;
        Ok((dataset, path, root))
    }

    fn manifest(&self) -> RunManifest {
        RunManifest::load_or_new(
            &self.out_dir,
            self.config.digest(),
            serde_json::to_value(&self.config).expect("config serializes"),
        )
    }

    fn save_manifest(&self, manifest: &RunManifest) -> Result<(), CliError> {
        if self.record_manifest {
            manifest.save(&self.out_dir.join(MANIFEST_FILE))?;
        }
        Ok(())
    }
}

pub struct RoleClient {
    pub client: ChatClient,
    pub model: String,
    pub provider_id: String,
    pub supports_images: bool,
}

/// Runs `f` over `items` on a bounded worker pool, assembling results in
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = workers.clamp(1, n);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let f = &f;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let result = f(&items[i]);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
    });
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}

/// Content hash over the dataset records and every referenced screenshot.
pub fn dataset_digest(path: &Path, root: &Path) -> Result<String, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot read dataset {path:?}: {e}")))?;
    let reader = std::io::BufReader::new(file);
    let mut hasher = Hasher::new();
    let mut screenshot_paths: BTreeSet<String> = BTreeSet::new();
    for line in reader.lines() {
        let line = line.map_err(|e| CliError::Other(anyhow::anyhow!("reading dataset: {e}")))?;
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&line) {
            if let Some(steps) = value.get("steps").and_then(|s| s.as_array()) {
                for step in steps {
                    if let Some(p) = step
                        .get("observation")
                        .and_then(|o| o.get("screenshot_path"))
                        .and_then(|p| p.as_str())
                    {
                        screenshot_paths.insert(p.to_string());
                    }
                }
            }
        }
    }
    for rel in screenshot_paths {
        hasher.update(rel.as_bytes());
        let full = root.join(&rel);
        if let Ok(digest) = sha256_file(&full) {
            hasher.update(digest.as_bytes());
        }
    }
    Ok(hasher.finish())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| CliError::Other(anyhow::anyhow!("creating {parent:?}: {e}")))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| CliError::Other(anyhow::anyhow!("writing {tmp:?}: {e}")))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Other(anyhow::anyhow!("renaming into {path:?}: {e}")))?;
    Ok(())
}

fn record_artifact(record: &mut StageRecord, out_dir: &Path, rel: &str) -> Result<(), CliError> {
    let digest = sha256_file(&out_dir.join(rel))
        .map_err(|e| CliError::Other(anyhow::anyhow!("hashing artifact {rel}: {e}")))?;
    record.artifacts.insert(rel.to_string(), digest);
    Ok(())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

// ---------------------------------------------------------------------------
// fixture
// ---------------------------------------------------------------------------

pub fn cmd_fixture(
    ctx: &StageContext,
    n: usize,
    steps_per: usize,
    failure_fraction: f64,
    out_file: Option<PathBuf>,
) -> Result<i32, CliError> {
    let dataset = synthesize_fixture(n, steps_per, failure_fraction, ctx.config.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let path = out_file
        .or_else(|| ctx.config.dataset.clone())
        .unwrap_or_else(|| ctx.out_dir.join("fixture.jsonl"));
    save_dataset(&dataset, &path).map_err(|e| CliError::Other(anyhow::anyhow!("writing fixture: {e}")))?;
    let failures = dataset
        .trajectories
        .iter()
        .filter(|t| t.gold_label == GoldLabel::Failure)
        .count();
    println!(
        "fixture: wrote {} trajectories ({} gold failures, seed {}) to {}",
        dataset.len(),
        failures,
        ctx.config.seed,
        path.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// label
// ---------------------------------------------------------------------------

pub fn cmd_label(ctx: &StageContext) -> Result<i32, CliError> {
    let started_at = now();
    let (mut dataset, dataset_path, root) = ctx.load_effective_dataset()?;
    let labeler = ctx.client("labeler")?;
    if let (Some(judge_cfg), Some(labeler_cfg)) =
        (ctx.config.providers.role("judge"), ctx.config.providers.role("labeler"))
    {
        if judge_cfg.model == labeler_cfg.model {
            eprintln!(
                "warning: labeler model {:?} equals the judge under test; silver labels will not be independent",
                labeler_cfg.model
            );
        }
    }

    let store = ImageStore::new(&root);
    let unlabeled: Vec<usize> = dataset
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| t.gold_label == GoldLabel::Unlabeled)
        .map(|(i, _)| i)
        .collect();

    let mut request_digests = Vec::new();
    let mut warning_messages: Vec<String> = Vec::new();
    let mut labeled = 0u64;
    for index in unlabeled {
        let view = TrajectoryView::original(&dataset.trajectories[index]);
        let images = stage_image_policy(&labeler, ctx, &store);
        let result = judge(
            &labeler.client,
            &labeler.model,
            &view,
            JudgeMode::Standard,
            &ScalingConfig::None,
            None,
            &JudgeOptions {
                images,
                layout: ctx.config.prompt_layout,
                transport_retry: ctx.retry_policy(),
                max_output_tokens: ctx.config.max_output_tokens,
            },
        )
        .map_err(|e| CliError::Partial(format!("labeler failed on {}: {e}", dataset.trajectories[index].id)))?;
        request_digests.extend(result.request_digests.clone());
        match result.final_verdict {
            Verdict::Success => {
                dataset.trajectories[index].gold_label = GoldLabel::Success;
                dataset.trajectories[index].source = format!("silver:{}", labeler.model);
                labeled += 1;
            }
            Verdict::Failure => {
                dataset.trajectories[index].gold_label = GoldLabel::Failure;
                dataset.trajectories[index].source = format!("silver:{}", labeler.model);
                labeled += 1;
            }
            Verdict::Unparsed => {
                let message = format!(
                    "labeler verdict unparsed for {}; leaving unlabeled",
                    dataset.trajectories[index].id
                );
                eprintln!("warning: {message}");
                warning_messages.push(message);
            }
        }
    }

    let labeled_path = ctx.out_dir.join(LABELED_FILE);
    let mut buf = Vec::new();
    cotjudge_core::trajectory::write_dataset(&dataset, &mut buf)
        .map_err(|e| CliError::Other(anyhow::anyhow!("serializing labeled dataset: {e}")))?;
    atomic_write(&labeled_path, &buf)?;

    for warning in labeler.client.drain_warnings() {
        eprintln!("warning: {warning}");
        warning_messages.push(warning);
    }
    let warnings = warning_messages.len() as u64;

    if ctx.record_manifest {
        let mut manifest = ctx.manifest();
        manifest.dataset_path = Some(dataset_path.display().to_string());
        manifest.dataset_digest = Some(dataset_digest(&dataset_path, &root)?);
        manifest.record_provider("labeler", labeler.provider_id.clone(), labeler.model.clone());
        record_mock(ctx, &mut manifest)?;
        let mut record = StageRecord {
            started_at,
            finished_at: now(),
            request_digests,
            warnings,
            warning_messages: warning_messages.clone(),
            failures: 0,
            ..Default::default()
        };
        record_artifact(&mut record, &ctx.out_dir, LABELED_FILE)?;
        manifest.record_stage("label", record);
        ctx.save_manifest(&manifest)?;
    }

    println!("label: {labeled} silver labels written, {warnings} warnings -> {}", labeled_path.display());
    Ok(0)
}

fn stage_image_policy<'a>(role: &RoleClient, ctx: &StageContext, store: &'a ImageStore) -> ImagePolicy<'a> {
    if ctx.mock.is_some() {
        ImagePolicy::Markers
    } else if role.supports_images {
        ImagePolicy::Attach(store)
    } else {
        ImagePolicy::CaptionsWithFallback
    }
}

fn record_mock(ctx: &StageContext, manifest: &mut RunManifest) -> Result<(), CliError> {
    if let Some(path) = &ctx.mock_script_path {
        manifest.mock_script = Some(path.display().to_string());
        manifest.mock_script_digest = Some(
            sha256_file(path).map_err(|e| CliError::Other(anyhow::anyhow!("hashing mock script: {e}")))?,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// manipulate
// ---------------------------------------------------------------------------

pub fn cmd_manipulate(ctx: &StageContext) -> Result<i32, CliError> {
    let started_at = now();
    let plan = ctx.config.plan()?;
    if plan.strategies.is_empty() {
        return Err(CliError::Config("no strategies selected".to_string()));
    }
    let (dataset, dataset_path, root) = ctx.load_effective_dataset()?;
    if dataset.trajectories.iter().any(|t| t.gold_label == GoldLabel::Unlabeled) {
        return Err(CliError::Config(
            "dataset contains unlabeled trajectories; run `label` first".to_string(),
        ));
    }

    let mut failures_set: Vec<&Trajectory> = dataset
        .trajectories
        .iter()
        .filter(|t| t.gold_label == GoldLabel::Failure)
        .collect();
    failures_set.sort_by(|a, b| a.id.cmp(&b.id));

    let rewriter = ctx.client("rewriter")?;
    let store = ImageStore::new(&root);

    let mut exclusions: Vec<ExclusionRecord> = Vec::new();
    let mut request_digests: Vec<String> = Vec::new();
    let mut total_success = 0u64;
    let mut artifact_paths: Vec<String> = Vec::new();

    for strategy in &plan.strategies {
        let outcomes = parallel_map(&failures_set, ctx.workers("rewriter"), |t| {
            let images = stage_image_policy(&rewriter, ctx, &store);
            manipulate(
                t,
                *strategy,
                &rewriter.client,
                &rewriter.model,
                &ManipulateOptions {
                    max_attempts: ctx.config.rewrite_max_attempts,
                    transport_retry: ctx.retry_policy(),
                    images,
                    max_output_tokens: ctx.config.max_output_tokens,
                },
            )
        });
        let mut records: Vec<ManipulatedRecord> = Vec::new();
        for (t, outcome) in failures_set.iter().zip(outcomes) {
            match outcome {
                Ok(m) => {
                    request_digests.push(m.rewrite_digest.clone());
                    records.push(ManipulatedRecord::new(t, &m));
                }
                Err(err) => {
                    let attempts = match &err {
                        cotjudge_core::manipulation::RewriteError::Failed { attempts, .. } => *attempts,
                        _ => 0,
                    };
                    eprintln!("rewrite excluded: {} ({}): {err}", t.id, strategy.slug());
                    exclusions.push(ExclusionRecord {
                        id: t.id.clone(),
                        strategy: strategy.slug().to_string(),
                        reason: err.to_string(),
                        attempts,
                    });
                }
            }
        }
        total_success += records.len() as u64;
        let rel = format!("manipulated/{}.jsonl", strategy.slug());
        let mut buf = Vec::new();
        for record in &records {
            serde_json::to_writer(&mut buf, record)
                .map_err(|e| CliError::Other(anyhow::anyhow!("serializing manipulated record: {e}")))?;
            buf.push(b'\n');
        }
        atomic_write(&ctx.out_dir.join(&rel), &buf)?;
        artifact_paths.push(rel);
    }

    let exclusion_bytes = serde_json::to_vec_pretty(&exclusions)
        .map_err(|e| CliError::Other(anyhow::anyhow!("serializing exclusions: {e}")))?;
    atomic_write(&ctx.out_dir.join(EXCLUSIONS_FILE), &exclusion_bytes)?;
    artifact_paths.push(EXCLUSIONS_FILE.to_string());

    let mut warning_messages: Vec<String> = Vec::new();
    for warning in rewriter.client.drain_warnings() {
        eprintln!("warning: {warning}");
        warning_messages.push(warning);
    }

    if ctx.record_manifest {
        let mut manifest = ctx.manifest();
        manifest.dataset_path = Some(dataset_path.display().to_string());
        manifest.dataset_digest = Some(dataset_digest(&dataset_path, &root)?);
        manifest.record_provider("rewriter", rewriter.provider_id.clone(), rewriter.model.clone());
        record_mock(ctx, &mut manifest)?;
        manifest.exclusions = exclusions.clone();
        let mut record = StageRecord {
            started_at,
            finished_at: now(),
            request_digests,
            warnings: warning_messages.len() as u64,
            warning_messages: warning_messages.clone(),
            failures: exclusions.len() as u64,
            ..Default::default()
        };
        for rel in &artifact_paths {
            record_artifact(&mut record, &ctx.out_dir, rel)?;
        }
        manifest.record_stage("manipulate", record);
        ctx.save_manifest(&manifest)?;
    }

    if failures_set.is_empty() {
        println!("manipulate: nothing to manipulate (no gold-failure trajectories); wrote empty outputs");
        return Ok(0);
    }
    println!(
        "manipulate: {} rewrites across {} strategies, {} excluded -> {}",
        total_success,
        plan.strategies.len(),
        exclusions.len(),
        ctx.out_dir.join("manipulated").display()
    );
    if total_success == 0 {
        return Err(CliError::Partial("all rewrites failed; see exclusions.json".to_string()));
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// judge
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct VariantData {
    id: String,
    variant: Variant,
    task: Arc<String>,
    steps: Arc<Vec<Step>>,
}

struct JudgeWorkItem {
    data: VariantData,
    mode: JudgeMode,
    scaling: ScalingConfig,
    keypoints: Option<String>,
}

fn result_key(r: &JudgeResult) -> (String, String, String, String, String) {
    (
        r.trajectory_id.clone(),
        r.variant.label(),
        r.mode.slug().to_string(),
        r.scaling.to_string(),
        r.judge_model.clone(),
    )
}

pub fn load_results(path: &Path) -> Result<Vec<JudgeResult>, CliError> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::Other(anyhow::anyhow!("reading {path:?}: {e}"))),
    };
    let reader = std::io::BufReader::new(file);
    let mut results = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::Other(anyhow::anyhow!("reading {path:?}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let result: JudgeResult = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("bad judge result at {path:?}:{}: {e}", i + 1)))?;
        results.push(result);
    }
    Ok(results)
}

fn write_results(path: &Path, results: &mut [JudgeResult]) -> Result<(), CliError> {
    results.sort_by_key(result_key);
    let mut buf = Vec::new();
    for r in results.iter() {
        serde_json::to_writer(&mut buf, r)
            .map_err(|e| CliError::Other(anyhow::anyhow!("serializing judge result: {e}")))?;
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

fn load_manipulated(ctx: &StageContext, strategy: Strategy) -> Result<Vec<ManipulatedRecord>, CliError> {
    let path = ctx.out_dir.join(format!("manipulated/{}.jsonl", strategy.slug()));
    let file = std::fs::File::open(&path).map_err(|_| {
        CliError::Config(format!(
            "manipulated dataset for strategy {:?} not found at {}; run `manipulate` first",
            strategy.slug(),
            path.display()
        ))
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::Other(anyhow::anyhow!("reading {path:?}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManipulatedRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("bad manipulated record at {path:?}:{}: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

pub fn cmd_judge(ctx: &StageContext) -> Result<i32, CliError> {
    let started_at = now();
    let plan = ctx.config.plan()?;
    let (dataset, dataset_path, root) = ctx.load_effective_dataset()?;
    let judge_role = ctx.client("judge")?;

    // Assemble all variants: labeled originals plus every manipulated record
    // for the selected strategies.
    let mut variants: Vec<VariantData> = Vec::new();
    let mut skipped_unlabeled = 0u64;
    for t in &dataset.trajectories {
        if t.gold_label == GoldLabel::Unlabeled {
            skipped_unlabeled += 1;
            continue;
        }
        variants.push(VariantData {
            id: t.id.clone(),
            variant: Variant::Original,
            task: Arc::new(t.task.clone()),
            steps: Arc::new(t.steps.clone()),
        });
    }
    for strategy in &plan.strategies {
        for record in load_manipulated(ctx, *strategy)? {
            variants.push(VariantData {
                id: record.source_id.clone(),
                variant: Variant::Manipulated(record.strategy),
                task: Arc::new(record.task.clone()),
                steps: Arc::new(record.steps.clone()),
            });
        }
    }
    variants.sort_by_key(|a| (a.id.clone(), a.variant.label()));
    if skipped_unlabeled > 0 {
        eprintln!("warning: skipped {skipped_unlabeled} unlabeled trajectories (metrics refuse them)");
    }

    // Caption-modality precondition: checked before any request.
    if plan.modes.contains(&JudgeMode::CaptionModality) {
        for v in &variants {
            for step in v.steps.iter() {
                if !step.observation.has_caption() {
                    return Err(CliError::Config(format!(
                        "caption_modality requested but trajectory {:?} step {} has no caption",
                        v.id, step.index
                    )));
                }
            }
        }
    }

    // Rubric keypoints: one request per unique task, judge's own model.
    let mut keypoints_by_task: BTreeMap<String, String> = BTreeMap::new();
    if plan.modes.contains(&JudgeMode::WebJudgeRubric) {
        let tasks: BTreeSet<String> = variants.iter().map(|v| v.task.as_ref().clone()).collect();
        for task in tasks {
            let text = generate_keypoints(&judge_role.client, &judge_role.model, &task)
                .map_err(|e| CliError::Partial(format!("keypoint generation failed: {e}")))?;
            keypoints_by_task.insert(task, text);
        }
    }

    let results_path = ctx.out_dir.join(RESULTS_FILE);
    let mut results = load_results(&results_path)?;
    let existing: BTreeSet<_> = results.iter().map(result_key).collect();

    let mut items: Vec<JudgeWorkItem> = Vec::new();
    for v in &variants {
        for mode in &plan.modes {
            for scaling in &plan.scaling {
                let probe = JudgeResult {
                    trajectory_id: v.id.clone(),
                    variant: v.variant,
                    mode: *mode,
                    scaling: *scaling,
                    judge_model: judge_role.model.clone(),
                    raw_texts: vec![],
                    votes: vec![],
                    final_verdict: Verdict::Unparsed,
                    keypoints: None,
                    request_digests: vec![],
                    cached: false,
                };
                if existing.contains(&result_key(&probe)) {
                    continue;
                }
                items.push(JudgeWorkItem {
                    data: v.clone(),
                    mode: *mode,
                    scaling: *scaling,
                    keypoints: (*mode == JudgeMode::WebJudgeRubric)
                        .then(|| keypoints_by_task.get(v.task.as_ref()).cloned())
                        .flatten(),
                });
            }
        }
    }

    let store = ImageStore::new(&root);
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let outcomes = parallel_map(&items, ctx.workers("judge"), |item| {
        let view = TrajectoryView {
            id: &item.data.id,
            variant: item.data.variant,
            task: item.data.task.as_ref(),
            steps: item.data.steps.as_ref(),
        };
        let images = stage_image_policy(&judge_role, ctx, &store);
        match judge(
            &judge_role.client,
            &judge_role.model,
            &view,
            item.mode,
            &item.scaling,
            item.keypoints.clone(),
            &JudgeOptions {
                images,
                layout: ctx.config.prompt_layout,
                transport_retry: ctx.retry_policy(),
                max_output_tokens: ctx.config.max_output_tokens,
            },
        ) {
            Ok(result) => Some(result),
            Err(e) => {
                failures.lock().unwrap().push(format!(
                    "{}/{}/{}/{}: {e}",
                    item.data.id,
                    item.data.variant.label(),
                    item.mode,
                    item.scaling
                ));
                None
            }
        }
    });

    let new_results: Vec<JudgeResult> = outcomes.into_iter().flatten().collect();
    let new_count = new_results.len();
    let request_digests: Vec<String> = new_results.iter().flat_map(|r| r.request_digests.clone()).collect();
    results.extend(new_results);
    write_results(&results_path, &mut results)?;

    let failures = failures.into_inner().unwrap();
    for f in &failures {
        eprintln!("judge failure: {f}");
    }
    let mut warning_messages: Vec<String> = Vec::new();
    if skipped_unlabeled > 0 {
        warning_messages.push(format!("skipped {skipped_unlabeled} unlabeled trajectories"));
    }
    for warning in judge_role.client.drain_warnings() {
        eprintln!("warning: {warning}");
        warning_messages.push(warning);
    }

    if ctx.record_manifest {
        let mut manifest = ctx.manifest();
        manifest.dataset_path = Some(dataset_path.display().to_string());
        manifest.dataset_digest = Some(dataset_digest(&dataset_path, &root)?);
        manifest.record_provider("judge", judge_role.provider_id.clone(), judge_role.model.clone());
        record_mock(ctx, &mut manifest)?;
        let mut record = StageRecord {
            started_at,
            finished_at: now(),
            request_digests,
            warnings: warning_messages.len() as u64,
            warning_messages: warning_messages.clone(),
            failures: failures.len() as u64,
            ..Default::default()
        };
        record_artifact(&mut record, &ctx.out_dir, RESULTS_FILE)?;
        manifest.record_stage("judge", record);
        ctx.save_manifest(&manifest)?;
    }

    println!(
        "judge: {} new results ({} total), {} failures -> {}",
        new_count,
        results.len(),
        failures.len(),
        results_path.display()
    );
    if !failures.is_empty() {
        return Err(CliError::Partial(format!("{} judge tuples failed", failures.len())));
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const PLOTDATA_CSV: &str = "plotdata.csv";

pub fn cmd_score(ctx: &StageContext) -> Result<i32, CliError> {
    let started_at = now();
    if ctx.config.bootstrap_iterations < 100 {
        return Err(CliError::Config(format!(
            "bootstrap_iterations must be >= 100, got {}",
            ctx.config.bootstrap_iterations
        )));
    }
    let results_path = ctx.out_dir.join(RESULTS_FILE);
    let results = load_results(&results_path)?;
    if results.is_empty() {
        return Err(CliError::Config(format!(
            "no results in {} (run `judge` first)",
            results_path.display()
        )));
    }
    let (dataset, dataset_path, root) = ctx.load_effective_dataset()?;
    let gold: BTreeMap<&str, GoldLabel> = dataset
        .trajectories
        .iter()
        .map(|t| (t.id.as_str(), t.gold_label))
        .collect();

    let mut originals: Vec<OriginalOutcome> = Vec::new();
    let mut original_index: BTreeMap<(String, String, String, String), Verdict> = BTreeMap::new();
    let mut join_failures: Vec<String> = Vec::new();
    let mut skipped_unlabeled = 0u64;

    for r in &results {
        if r.variant != Variant::Original {
            continue;
        }
        match gold.get(r.trajectory_id.as_str()) {
            Some(GoldLabel::Unlabeled) | None => {
                skipped_unlabeled += 1;
                continue;
            }
            Some(label) => {
                originals.push(OriginalOutcome {
                    trajectory_id: r.trajectory_id.clone(),
                    gold: *label,
                    verdict: r.final_verdict,
                    judge_model: r.judge_model.clone(),
                    mode: r.mode,
                    scaling: r.scaling,
                });
                original_index.insert(
                    (
                        r.trajectory_id.clone(),
                        r.mode.slug().to_string(),
                        r.scaling.to_string(),
                        r.judge_model.clone(),
                    ),
                    r.final_verdict,
                );
            }
        }
    }

    let mut pairs: Vec<PairedOutcome> = Vec::new();
    for r in &results {
        let Variant::Manipulated(strategy) = r.variant else { continue };
        let Some(label) = gold.get(r.trajectory_id.as_str()).copied() else {
            join_failures.push(format!("{}: not in dataset", r.trajectory_id));
            continue;
        };
        if label == GoldLabel::Unlabeled {
            skipped_unlabeled += 1;
            continue;
        }
        let key = (
            r.trajectory_id.clone(),
            r.mode.slug().to_string(),
            r.scaling.to_string(),
            r.judge_model.clone(),
        );
        match original_index.get(&key) {
            Some(original_verdict) => pairs.push(PairedOutcome {
                trajectory_id: r.trajectory_id.clone(),
                gold: label,
                original_verdict: *original_verdict,
                manipulated_verdict: r.final_verdict,
                strategy,
                judge_model: r.judge_model.clone(),
                mode: r.mode,
                scaling: r.scaling,
            }),
            None => join_failures.push(format!(
                "{} ({}/{}/{}): no original result to pair with",
                r.trajectory_id, r.mode, r.scaling, r.judge_model
            )),
        }
    }

    let report = aggregate_report(
        &originals,
        &pairs,
        &ReportOptions {
            bootstrap_iterations: Some(ctx.config.bootstrap_iterations),
            bootstrap_seed: ctx.config.seed,
        },
    )
    .map_err(|e| CliError::Other(anyhow::anyhow!("aggregating metrics: {e}")))?;

    let mut csv_buf = Vec::new();
    write_metrics_csv(&report, &mut csv_buf)
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing metrics.csv: {e}")))?;
    atomic_write(&ctx.out_dir.join(METRICS_CSV), &csv_buf)?;

    let json_buf = serde_json::to_vec_pretty(&report)
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing metrics.json: {e}")))?;
    atomic_write(&ctx.out_dir.join(METRICS_JSON), &json_buf)?;

    let mut plot_buf = Vec::new();
    write_plot_csv(&plot_rows(&report), &mut plot_buf)
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing plotdata.csv: {e}")))?;
    atomic_write(&ctx.out_dir.join(PLOTDATA_CSV), &plot_buf)?;

    for failure in &join_failures {
        eprintln!("join failure: {failure}");
    }
    if skipped_unlabeled > 0 {
        eprintln!("warning: skipped {skipped_unlabeled} results for unlabeled trajectories");
    }

    if ctx.record_manifest {
        let mut manifest = ctx.manifest();
        manifest.dataset_path = Some(dataset_path.display().to_string());
        manifest.dataset_digest = Some(dataset_digest(&dataset_path, &root)?);
        let mut record = StageRecord {
            started_at,
            finished_at: now(),
            warnings: skipped_unlabeled,
            failures: join_failures.len() as u64,
            ..Default::default()
        };
        for rel in [METRICS_CSV, METRICS_JSON, PLOTDATA_CSV] {
            record_artifact(&mut record, &ctx.out_dir, rel)?;
        }
        manifest.record_stage("score", record);
        ctx.save_manifest(&manifest)?;
    }

    println!(
        "score: {} rows ({} pairs, {} join failures) -> {}",
        report.rows.len(),
        pairs.len(),
        join_failures.len(),
        ctx.out_dir.join(METRICS_CSV).display()
    );
    if !join_failures.is_empty() && ctx.strict {
        return Err(CliError::Partial(format!(
            "{} join failures under --strict",
            join_failures.len()
        )));
    }
    Ok(0)
}
