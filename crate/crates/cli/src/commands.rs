use std::collections::HashSet;
use std::fs;
use std::path::Path;

use anyhow::Context;
use bknn::ann::{IvfConfig, IvfIndex};
use bknn::corpus::{read_documents_jsonl, Corpus};
use bknn::datastore::{
    self, manifest_path, Datastore, DatastoreManifest, MemoryStore, RecordSource,
};
use bknn::embedder::{EmbedderConfig, EmbedderKind, ImportedQueryEmbeddings, ReferenceEmbedder};
use bknn::eval::{dataset_ids, evaluate, grid_search, read_dataset_jsonl, Dataset, GridSpec};
use bknn::ir::InvertedIndex;
use bknn::pipeline::{
    CandidateVocabulary, ImportedPredictions, LanguageModel, Mode, Pipeline, QueryEncoder,
    ReferenceLm, Retrieval,
};
use bknn::query::ClozeQuery;
use serde_json::json;

use crate::config::{required, write_output, ProjectConfig, StubLm};
use crate::{ArtifactArgs, Command, EmbedderChoice, UsageError};

const DEFAULT_DIM: usize = 256;

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest { corpus, out } => ingest(&corpus, &out),
        Command::BuildDatastore {
            corpus,
            embedder,
            embeddings,
            dim,
            layer_tag,
            out,
        } => build_datastore(
            &corpus,
            embedder,
            embeddings.as_deref(),
            dim,
            layer_tag,
            &out,
        ),
        Command::AppendDatastore {
            store,
            corpus,
            corpus_dir,
            embeddings,
        } => append_datastore(&store, &corpus, &corpus_dir, embeddings.as_deref()),
        Command::BuildIr { corpus, out } => {
            let corpus = Corpus::load(&corpus)?;
            let index = InvertedIndex::build(&corpus);
            index.save(&out)?;
            println!(
                "indexed {} documents, {} terms",
                index.doc_count(),
                index.terms().count()
            );
            Ok(())
        }
        Command::BuildAnn {
            store,
            clusters,
            probe,
            pq,
            training_sample,
            seed,
            out,
        } => {
            let (pq_enabled, pq_subquantizers, pq_bits) = match pq.as_deref() {
                None => (false, IvfConfig::default().pq_subquantizers, 8),
                Some([m, bits]) => {
                    let bits = u8::try_from(*bits)
                        .map_err(|_| UsageError(format!("--pq bits {bits} out of range")))?;
                    (true, *m, bits)
                }
                Some(_) => return Err(UsageError("--pq takes M and BITS".into()).into()),
            };
            let config = IvfConfig {
                n_clusters: clusters,
                n_probe: probe,
                training_sample,
                pq_enabled,
                pq_subquantizers,
                pq_bits,
                seed,
            };
            build_ann(&store, &config, &out)
        }
        Command::Query {
            artifacts,
            text,
            subject,
            query_id,
            top,
            neighbors,
            mode,
            no_ir,
            json,
        } => {
            let mut query = ClozeQuery::parse(query_id, &text)?;
            if let Some(s) = subject {
                query = query.with_subject(&s);
            }
            let config = resolve(&artifacts)?;
            let mode = Mode::from(mode);
            let loaded = Loaded::load(&config, mode, !no_ir, false)?;
            answer_query(&loaded, &query, mode, top, neighbors, json)
        }
        Command::Eval {
            artifacts,
            dataset,
            exclude,
            mode,
            no_ir,
            report,
        } => {
            let config = resolve(&artifacts)?;
            let mode = Mode::from(mode);
            let loaded = Loaded::load(&config, mode, !no_ir, true)?;
            let exclude: HashSet<String> = match exclude {
                Some(path) => dataset_ids(&read_dataset_jsonl(&path)?)?
                    .into_iter()
                    .collect(),
                None => HashSet::new(),
            };
            let rows = read_dataset_jsonl(&dataset)?;
            let data =
                Dataset::prepare(&rows, loaded.corpus.vocab(), &loaded.candidates, &exclude)?;
            let pipeline = loaded.pipeline(mode, !no_ir)?;
            let result = evaluate(&data, &pipeline, loaded.corpus.vocab(), mode)?;
            write_output(&report, &result.to_json())?;
            print!("{}", result.text_table());
            Ok(())
        }
        Command::Gridsearch {
            artifacts,
            dev,
            grid,
            out,
        } => {
            let config = resolve(&artifacts)?;
            let loaded = Loaded::load(&config, Mode::Interpolated, true, true)?;
            let spec: GridSpec = match grid {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text)
                        .map_err(|e| UsageError(format!("invalid grid {}: {e}", path.display())))?
                }
                None => GridSpec::default(),
            };
            let rows = read_dataset_jsonl(&dev)?;
            let data = Dataset::prepare(
                &rows,
                loaded.corpus.vocab(),
                &loaded.candidates,
                &HashSet::new(),
            )?;
            let pipeline = loaded.pipeline(Mode::Interpolated, true)?;
            let result = grid_search(&data, &pipeline, &spec)?;
            write_output(&out, &result.to_json())?;
            let b = &result.best;
            println!(
                "best of {} cells: N={} lambda={} k={} l={} P@1={:.4}",
                result.cells.len(),
                b.point.top_n,
                b.point.lambda,
                b.point.k,
                b.point.distance_scale,
                b.precision.p_at_1
            );
            Ok(())
        }
    }
}

fn ingest(input: &Path, out: &Path) -> anyhow::Result<()> {
    let docs = read_documents_jsonl(input)?;
    let corpus = Corpus::ingest(docs)?;
    corpus.save(out)?;
    println!(
        "ingested {} documents, {} tokens, vocabulary {}",
        corpus.len(),
        corpus.occurrence_count(),
        corpus.vocab().len()
    );
    Ok(())
}

fn build_datastore(
    corpus_dir: &Path,
    choice: EmbedderChoice,
    embeddings: Option<&Path>,
    dim: Option<usize>,
    layer_tag: Option<String>,
    out: &Path,
) -> anyhow::Result<()> {
    let corpus = Corpus::load(corpus_dir)?;
    let store = match choice {
        EmbedderChoice::Reference => {
            if embeddings.is_some() || layer_tag.is_some() {
                return Err(UsageError(
                    "--embeddings and --layer-tag apply to --embedder import".into(),
                )
                .into());
            }
            let embedder = ReferenceEmbedder::new(dim.unwrap_or(DEFAULT_DIM))?;
            datastore::build(&corpus, &embedder, out)?
        }
        EmbedderChoice::Import => {
            let exchange = required(
                &embeddings.map(Path::to_path_buf),
                "exchange store",
                "--embeddings",
            )?
            .to_path_buf();
            let found = DatastoreManifest::load(&manifest_path(&exchange))?.embedder;
            let expected = EmbedderConfig {
                dim: dim.unwrap_or(found.dim),
                layer_tag: layer_tag.unwrap_or_else(|| found.layer_tag.clone()),
                ..found
            };
            datastore::import(&exchange, &corpus, &expected, out)?
        }
    };
    let m = store.manifest();
    println!(
        "datastore: {} records, dim {}, {} skipped occurrences",
        m.record_count, m.dim, m.skipped_occurrences
    );
    Ok(())
}

fn append_datastore(
    store: &Path,
    docs: &Path,
    corpus_dir: &Path,
    embeddings: Option<&Path>,
) -> anyhow::Result<()> {
    let current = Datastore::open_verified(store)?;
    let mut corpus = Corpus::load(corpus_dir)?;
    let new_docs = corpus.append(read_documents_jsonl(docs)?)?;
    let updated = match (current.embedder().kind, embeddings) {
        (EmbedderKind::Reference, None) => {
            let embedder = ReferenceEmbedder::with_config(current.embedder().clone())?;
            datastore::append(store, &corpus, new_docs.clone(), &embedder)?
        }
        (EmbedderKind::Imported, Some(exchange)) => {
            datastore::append_imported(store, exchange, &corpus, new_docs.clone())?
        }
        (EmbedderKind::Reference, Some(_)) => {
            return Err(
                UsageError("--embeddings applies to imported datastores only".into()).into(),
            )
        }
        (EmbedderKind::Imported, None) => {
            return Err(UsageError(
                "an imported datastore needs --embeddings for the new documents".into(),
            )
            .into())
        }
    };
    // The store is committed first; the corpus follows so both describe the same documents.
    corpus.save(corpus_dir)?;
    println!(
        "appended {} documents; datastore now {} records",
        new_docs.len(),
        updated.manifest().record_count
    );
    Ok(())
}

fn build_ann(store: &Path, config: &IvfConfig, out: &Path) -> anyhow::Result<()> {
    let store = Datastore::open_verified(store)?;
    let mut index = IvfIndex::train(&store, config)?;
    index.populate(&store)?;
    index.save(out)?;
    println!(
        "ann index: {} clusters, {} records, {} code bytes",
        index.n_clusters(),
        index.record_count(),
        config.code_bytes()
    );
    Ok(())
}

fn resolve(args: &ArtifactArgs) -> anyhow::Result<ProjectConfig> {
    let mut c = match &args.config {
        Some(path) => ProjectConfig::load(path)?,
        None => ProjectConfig::default(),
    };
    let set = |dst: &mut Option<std::path::PathBuf>, src: &Option<std::path::PathBuf>| {
        if src.is_some() {
            dst.clone_from(src);
        }
    };
    set(&mut c.corpus, &args.corpus);
    set(&mut c.datastore, &args.store);
    set(&mut c.ir_index, &args.ir);
    set(&mut c.ann_index, &args.ann);
    set(&mut c.candidates, &args.candidates);
    set(&mut c.lm_predictions, &args.lm_predictions);
    set(&mut c.query_embeddings, &args.query_embeddings);
    if let Some(v) = args.stub_lm {
        c.stub_lm = v;
    }
    if let Some(v) = args.k {
        c.knn.k = v;
    }
    if let Some(v) = args.distance_scale {
        c.knn.distance_scale = v;
    }
    if let Some(v) = args.lambda {
        c.interpolation.lambda = v;
    }
    if let Some(v) = args.top_n {
        c.ir.top_n = v;
    }
    if args.no_subject_shortcut {
        c.ir.use_subject_shortcut = false;
    }
    if let Some(v) = args.probe {
        c.ivf.n_probe = v;
    }
    c.knn.validate().map_err(|e| UsageError(e.to_string()))?;
    c.ir.validate().map_err(|e| UsageError(e.to_string()))?;
    c.interpolation
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    Ok(c)
}

enum Store {
    Disk(Datastore),
    Memory(MemoryStore),
}

impl Store {
    fn source(&self) -> &dyn RecordSource {
        match self {
            Store::Disk(s) => s,
            Store::Memory(s) => s,
        }
    }
}

struct Loaded {
    config: ProjectConfig,
    corpus: Corpus,
    candidates: CandidateVocabulary,
    lm: Box<dyn LanguageModel>,
    store: Option<Store>,
    embedder: Option<ReferenceEmbedder>,
    query_embeddings: Option<ImportedQueryEmbeddings>,
    ir: Option<InvertedIndex>,
    ann: Option<IvfIndex>,
}

impl Loaded {
    fn load(
        config: &ProjectConfig,
        mode: Mode,
        use_ir: bool,
        in_memory: bool,
    ) -> anyhow::Result<Self> {
        let corpus = Corpus::load(required(&config.corpus, "corpus", "--corpus")?)?;
        let candidates = match &config.candidates {
            Some(_) => CandidateVocabulary::load(
                required(&config.candidates, "candidate vocabulary", "--candidates")?,
                corpus.vocab(),
            )?,
            None => CandidateVocabulary::full(corpus.vocab())?,
        };
        let lm: Box<dyn LanguageModel> = match &config.lm_predictions {
            Some(_) => Box::new(ImportedPredictions::load(
                required(&config.lm_predictions, "LM predictions", "--lm-predictions")?,
                corpus.vocab(),
                &candidates,
            )?),
            None => match config.stub_lm {
                StubLm::Uniform => Box::new(ReferenceLm::uniform(corpus.vocab(), &candidates)),
                StubLm::Cooccurrence => Box::new(ReferenceLm::from_corpus(&corpus, &candidates)),
            },
        };
        let mut loaded = Self {
            config: config.clone(),
            corpus,
            candidates,
            lm,
            store: None,
            embedder: None,
            query_embeddings: None,
            ir: None,
            ann: None,
        };
        if mode == Mode::Lm {
            return Ok(loaded);
        }
        let path = required(&config.datastore, "datastore", "--store")?;
        let disk = if in_memory {
            Datastore::open_verified(path)?
        } else {
            Datastore::open(path)?
        };
        if disk.manifest().doc_count != loaded.corpus.len() as u64 {
            return Err(bknn::Error::InvalidArgument(format!(
                "datastore covers {} documents, corpus has {}",
                disk.manifest().doc_count,
                loaded.corpus.len()
            ))
            .into());
        }
        let embedder_config = disk.embedder().clone();
        match embedder_config.kind {
            EmbedderKind::Reference => {
                loaded.embedder = Some(ReferenceEmbedder::with_config(embedder_config)?);
            }
            EmbedderKind::Imported => {
                let path = required(
                    &config.query_embeddings,
                    "query embeddings",
                    "--query-embeddings",
                )?;
                loaded.query_embeddings =
                    Some(ImportedQueryEmbeddings::load(path, embedder_config)?);
            }
        }
        if use_ir {
            loaded.ir = Some(InvertedIndex::load(required(
                &config.ir_index,
                "IR index",
                "--ir",
            )?)?);
        } else {
            let ann = IvfIndex::load(required(&config.ann_index, "ANN index", "--ann")?)?;
            if ann.record_count() != disk.manifest().record_count
                || ann.dim() != disk.manifest().dim
            {
                return Err(bknn::Error::InvalidArgument(
                    "ANN index was built from a different datastore".into(),
                )
                .into());
            }
            if config.ivf.n_probe > ann.config().n_clusters {
                return Err(UsageError(format!(
                    "--probe {} exceeds the index's {} clusters",
                    config.ivf.n_probe,
                    ann.config().n_clusters
                ))
                .into());
            }
            loaded.ann = Some(ann);
        }
        loaded.store = Some(if in_memory && use_ir {
            Store::Memory(disk.load()?)
        } else {
            Store::Disk(disk)
        });
        Ok(loaded)
    }

    fn pipeline(&self, mode: Mode, use_ir: bool) -> anyhow::Result<Pipeline<'_>> {
        let encoder = match (&self.embedder, &self.query_embeddings) {
            (Some(e), _) => Some(QueryEncoder::Model(e)),
            (None, Some(q)) => Some(QueryEncoder::Imported(q)),
            (None, None) => None,
        };
        let retrieval = match (mode, use_ir) {
            (Mode::Lm, _) => None,
            (_, true) => Some(Retrieval::Ir {
                index: self.ir.as_ref().expect("loaded with the IR index"),
                source: self.store.as_ref().expect("loaded with the store").source(),
                config: self.config.ir,
            }),
            (_, false) => {
                let index = self.ann.as_ref().expect("loaded with the ANN index");
                Some(Retrieval::Ann {
                    index,
                    n_probe: self.config.ivf.n_probe,
                })
            }
        };
        Ok(Pipeline {
            lm: self.lm.as_ref(),
            candidates: &self.candidates,
            encoder,
            retrieval,
            knn: self.config.knn,
            interpolation: self.config.interpolation,
        })
    }
}

fn answer_query(
    loaded: &Loaded,
    query: &ClozeQuery,
    mode: Mode,
    top: usize,
    show_neighbors: usize,
    as_json: bool,
) -> anyhow::Result<()> {
    let pipeline = loaded.pipeline(mode, loaded.ir.is_some())?;
    let answer = pipeline.answer(query, mode)?;
    let vocab = loaded.corpus.vocab();
    let surface = |id| vocab.surface(id).unwrap_or("?");
    let title = |doc: u32| {
        loaded
            .corpus
            .document(doc)
            .map(|d| d.title.as_str())
            .unwrap_or("?")
    };
    let answers: Vec<(&str, f64)> = answer
        .ranking
        .iter()
        .take(top)
        .map(|(t, p)| (surface(*t), *p))
        .collect();
    let documents: Option<Vec<&str>> = answer
        .knn
        .as_ref()
        .and_then(|k| k.documents.as_ref())
        .map(|docs| docs.iter().map(|d| title(*d)).collect());
    let neighbors: Vec<_> = answer
        .knn
        .as_ref()
        .map(|k| k.neighbors.iter().take(show_neighbors).collect())
        .unwrap_or_default();
    let context = |doc: u32, sentence: u16| {
        loaded
            .corpus
            .sentence_surfaces(doc, sentence as usize)
            .map(|s| s.join(" "))
            .unwrap_or_default()
    };

    if as_json {
        let out = json!({
            "query_id": query.id,
            "query": query.text(),
            "mode": mode,
            "answers": answers.iter().map(|(t, p)| json!({"token": t, "probability": p})).collect::<Vec<_>>(),
            "documents": documents,
            "neighbors": neighbors.iter().map(|n| json!({
                "token": surface(n.meta.token_id),
                "distance": n.distance,
                "record": n.record,
                "document": title(n.meta.doc_id),
                "sentence": n.meta.sentence_index,
                "position": n.meta.token_index,
                "context": context(n.meta.doc_id, n.meta.sentence_index),
            })).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!("answers");
    for (t, p) in &answers {
        println!("  {t}\t{p:.4}");
    }
    if let Some(docs) = &documents {
        println!("documents");
        for d in docs {
            println!("  {d}");
        }
    }
    if !neighbors.is_empty() {
        println!("neighbors");
        for n in &neighbors {
            println!(
                "  {:.4}\t{}\t[{}] {}",
                n.distance,
                surface(n.meta.token_id),
                title(n.meta.doc_id),
                context(n.meta.doc_id, n.meta.sentence_index)
            );
        }
    }
    Ok(())
}
