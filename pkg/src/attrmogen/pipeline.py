"""Stage functions shared by the CLI and the experiment scripts.

Every stage reads its inputs from explicit directories, writes its outputs to
``out`` together with the resolved config, and embeds the config hash in what
it writes. Nothing written depends on wall-clock time or absolute paths.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .bounds import run_bound_suite
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .classifier import AttrClassifier, linear_probe, predict_joint, train_classifier
from .config import RunConfig, write_resolved
from .errors import SchemaError
from .evaluation import (
    attribute_control_protocol,
    evaluate_generation,
    export_features,
    load_feature_extractor,
    motion_features,
    save_feature_extractor,
    train_feature_extractor,
)
from .motion_data import Corpus, Record, denormalize_values, preprocess_corpus, read_corpus, write_corpus
from .schema import AttributeSchema
from .synth import SynthSpec, generate_corpus, nearest_prototype_class, oracle_attributes
from .transformer import (
    TextVocab,
    generate_motion,
    load_transformer,
    prompt_for,
    save_transformer,
    train_transformer,
)
from .vqvae import (
    encode_array,
    load_vqvae,
    reconstruct_array,
    relative_mse,
    save_vqvae,
    tokenize_array,
    train_decoup_vqvae,
)

# Default artifact layout under a run directory.
LAYOUT = {
    "corpus": "corpus",
    "preprocessed": "preprocessed",
    "vqvae": "vqvae",
    "transformer": "transformer",
    "eval_encoder": "eval_encoder",
    "attr_classifier": "attr_classifier",
    "reports": "reports",
    "generated": "generated",
    "features": "features",
}


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _stamp(cfg: RunConfig, out) -> dict:
    write_resolved(cfg, out)
    return {"run_config_hash": cfg.hash()}


def check_schema(corpus: Corpus, meta: dict, what: str) -> None:
    got = meta.get("schema_hash")
    if got != corpus.schema.hash():
        raise SchemaError(f"{what} schema hash {got} does not match corpus schema {corpus.schema.hash()}")


def synth_spec_of(corpus: Corpus) -> SynthSpec:
    if "synth_spec" not in corpus.meta:
        raise SchemaError("corpus carries no synthetic generator spec")
    return SynthSpec.from_dict(corpus.meta["synth_spec"])


# -- data ---------------------------------------------------------------------


def stage_synth(cfg: RunConfig, out) -> Corpus:
    corpus = generate_corpus(cfg.synth, cfg.data.n_per_cell, tuple(cfg.data.split_ratios))
    corpus.meta["run_config_hash"] = cfg.hash()
    write_corpus(corpus, out)
    write_resolved(cfg, out)
    return corpus


def stage_preprocess(cfg: RunConfig, corpus_dir, out) -> tuple[Corpus, dict]:
    corpus = read_corpus(corpus_dir)
    d = cfg.data
    pre, info = preprocess_corpus(corpus, vel_threshold=d.vel_threshold, outlier_threshold=d.outlier_threshold,
                                  denoise_sigma=d.denoise_sigma or None, mirror=d.mirror, normalize=True)
    pre.meta["preprocess"] = info
    pre.meta["run_config_hash"] = cfg.hash()
    write_corpus(pre, out)
    write_resolved(cfg, out)
    return pre, info


# -- training -----------------------------------------------------------------


def stage_train_vqvae(cfg: RunConfig, corpus_dir, out):
    corpus = read_corpus(corpus_dir)
    x, labels, _, _ = corpus.arrays("train")
    run = train_decoup_vqvae(dataclasses.replace(cfg.vqvae), x, labels, corpus.schema)
    save_vqvae(out, run, _stamp(cfg, out))
    return run


def transformer_prompts(texts, labels, mode: str, phase: str) -> list[str]:
    return [prompt_for(t, int(a), int(g), mode, phase) for t, (a, g) in zip(texts, labels)]


def stage_train_transformer(cfg: RunConfig, corpus_dir, vqvae_dir, out):
    corpus = read_corpus(corpus_dir)
    vq, vq_meta = load_vqvae(vqvae_dir)
    check_schema(corpus, vq_meta, "VQVAE")
    x, labels, texts, _ = corpus.arrays("train")
    tokens = tokenize_array(vq.model, x)
    prompts = transformer_prompts(texts, labels, cfg.transformer.attr_in_text, "train")
    # Vocabulary covers attribute phrases so "test"-only prompting stays in-vocabulary.
    vocab = TextVocab.build(prompts + transformer_prompts(texts, labels, "both", "train"))
    run = train_transformer(cfg.transformer, tokens, prompts, vq.model.cfg.n_codes, vocab)
    run.meta.update(vqvae_hash=config_hash(vq.model.cfg.to_dict()), token_length=int(tokens.shape[1]),
                    schema_hash=corpus.schema.hash())
    save_transformer(out, run, _stamp(cfg, out))
    return run


def stage_train_eval_encoder(cfg: RunConfig, corpus_dir, out):
    corpus = read_corpus(corpus_dir)
    x, _, texts, classes = corpus.arrays("train")
    fx = train_feature_extractor(cfg.eval, x, texts, classes)
    save_feature_extractor(out, fx, {"schema_hash": corpus.schema.hash(), **_stamp(cfg, out)})
    return fx


def stage_train_attr_classifier(cfg: RunConfig, corpus_dir, out) -> AttrClassifier:
    corpus = read_corpus(corpus_dir)
    x, labels, _, _ = corpus.arrays("train")
    schema = corpus.schema
    e = cfg.eval
    torch.manual_seed(e.seed)
    h = AttrClassifier(corpus.channels, schema.n_joint, e.classifier_width, cfg.vqvae.downsample_factor, 1,
                       schema.schema_id)
    train_classifier(h, x, schema.joint_indices(labels), iterations=e.classifier_iterations,
                     batch_size=e.batch_size, lr=e.lr, seed=e.seed)
    h.eval()
    meta = {"kind": "attr_classifier", "channels": corpus.channels, "width": e.classifier_width,
            "downsample": cfg.vqvae.downsample_factor, "schema": schema.to_dict(), "schema_hash": schema.hash(),
            **_stamp(cfg, out)}
    save_checkpoint(out, h.state_dict(), meta)
    return h


def load_attr_classifier(path) -> tuple[AttrClassifier, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "attr_classifier":
        raise SchemaError(f"{path} is not an attribute-classifier checkpoint")
    schema = AttributeSchema.from_dict(meta["schema"])
    h = AttrClassifier(meta["channels"], schema.n_joint, meta["width"], meta["downsample"], 1, schema.schema_id)
    h.load_state_dict(tensors)
    h.eval()
    return h, meta


# -- generation and evaluation -------------------------------------------------


def make_generator(vq_model, tr_run, stats=None, mode: str = "off", **decode_kw):
    """``gen(texts, labels, seed)`` -> motions; normalized when ``stats`` is None."""

    def gen(texts, labels, seed=0):
        prompts = transformer_prompts(texts, labels, mode, "test")
        g = torch.Generator().manual_seed(int(seed))
        return generate_motion(prompts, labels, vq_model, tr_run, stats, g, **decode_kw)

    return gen


def stage_evaluate(cfg: RunConfig, corpus_dir, vqvae_dir, transformer_dir, eval_dir, out) -> dict:
    corpus = read_corpus(corpus_dir)
    vq, vq_meta = load_vqvae(vqvae_dir)
    tr = load_transformer(transformer_dir)
    fx, fx_meta = load_feature_extractor(eval_dir)
    for what, meta in (("VQVAE", vq_meta), ("transformer", tr.meta), ("evaluation encoder", fx_meta)):
        check_schema(corpus, meta, what)
    x, labels, texts, _ = corpus.arrays("test")
    gen = make_generator(vq.model, tr, None, cfg.transformer.attr_in_text)
    first_label = {}
    for t, lab in zip(texts, labels):
        first_label.setdefault(t, lab)

    def mm_sample(text, seed):
        g = make_generator(vq.model, tr, None, cfg.transformer.attr_in_text, sample=True)
        return motion_features(fx, g([text], np.asarray([first_label[text]]), seed))[0]

    seeds = list(range(cfg.seed, cfg.seed + cfg.eval.repetitions))
    report = evaluate_generation(fx, x, texts, lambda s: gen(texts, labels, s), cfg.eval, seeds,
                                 cfg.hash(), mm_sample)
    rec = relative_mse(x, reconstruct_array(vq.model, x, labels))
    payload = {**report.to_dict(), "reconstruction_relative_mse": rec, "n_test": int(len(x))}
    write_json(Path(out) / "metrics.json", payload)
    write_resolved(cfg, out)
    return payload


def stage_attr_protocol(cfg: RunConfig, corpus_dir, vqvae_dir, transformer_dir, classifier_dir, out,
                        mode: str = "shuffled") -> dict:
    corpus = read_corpus(corpus_dir)
    vq, vq_meta = load_vqvae(vqvae_dir)
    tr = load_transformer(transformer_dir)
    h, h_meta = load_attr_classifier(classifier_dir)
    for what, meta in (("VQVAE", vq_meta), ("transformer", tr.meta), ("attribute classifier", h_meta)):
        check_schema(corpus, meta, what)
    result = run_attr_protocol(cfg, corpus, vq.model, tr, h, mode)
    write_json(Path(out) / f"attr_protocol_{mode}.json", result)
    write_resolved(cfg, out)
    return result


def run_attr_protocol(cfg: RunConfig, corpus: Corpus, vq_model, tr, h, mode: str) -> dict:
    """Classifier- and oracle-verified agreement with the attribute control input."""
    schema = corpus.schema
    x, labels, texts, _ = corpus.arrays("test")
    gen = make_generator(vq_model, tr, None, cfg.transformer.attr_in_text)
    cache = {}

    def generate(targets):
        cache["x"] = gen(texts, targets, cfg.seed)
        return cache["x"]

    def classify(motions):
        return schema.labels_from_joint(predict_joint(h, motions))

    out = {"classifier": attribute_control_protocol(generate, labels, classify, mode,
                                                    np.random.default_rng([cfg.seed, 31]), schema)}
    if "synth_spec" in corpus.meta:
        spec = synth_spec_of(corpus)
        stats = corpus.channel_stats

        def oracle(motions):
            raw = denormalize_values(motions, stats) if stats else motions
            return np.array([oracle_attributes(m, spec).label.as_tuple() for m in raw])

        out["oracle"] = attribute_control_protocol(lambda _t: cache["x"], labels, oracle, mode,
                                                   np.random.default_rng([cfg.seed, 31]), schema)
    return out


def prototype_accuracy(cfg: RunConfig, corpus: Corpus, vq_model, tr, per_cell: int = 1) -> dict:
    """Nearest-prototype class accuracy of motions generated from class prompts with matching attributes."""
    spec = synth_spec_of(corpus)
    texts, labels, classes = [], [], []
    for k in range(spec.n_classes):
        for age in range(4):
            for gender in range(2):
                for j in range(per_cell):
                    texts.append(spec.templates[k][j % len(spec.templates[k])])
                    labels.append((age, gender))
                    classes.append(k)
    labels = np.asarray(labels)
    raw = make_generator(vq_model, tr, corpus.channel_stats, cfg.transformer.attr_in_text)(texts, labels, cfg.seed)
    pred = np.array([nearest_prototype_class(m, spec, int(a), int(g)) for m, (a, g) in zip(raw, labels)])
    return {"accuracy": float(np.mean(pred == np.asarray(classes))), "n": len(texts)}


def stage_generate(cfg: RunConfig, vqvae_dir, transformer_dir, corpus_dir, texts: list[str], labels, out) -> Corpus:
    corpus = read_corpus(corpus_dir)
    vq, vq_meta = load_vqvae(vqvae_dir)
    tr = load_transformer(transformer_dir)
    check_schema(corpus, vq_meta, "VQVAE")
    labels = np.asarray(labels, np.int64).reshape(-1, 2)
    raw = make_generator(vq.model, tr, corpus.channel_stats, cfg.transformer.attr_in_text)(texts, labels, cfg.seed)
    records = [Record(id=f"g{i:05d}", length=raw.shape[1], channels=raw.shape[2], age_group=int(a), gender=int(g),
                      text=t, split="test") for i, (t, (a, g)) in enumerate(zip(texts, labels))]
    gen_corpus = Corpus(records=records, data=list(raw), channels=raw.shape[2], mirror_map=corpus.mirror_map,
                        schema=corpus.schema, frame_rate_hz=corpus.frame_rate_hz,
                        meta={"kind": "generated", "run_config_hash": cfg.hash(),
                              "vqvae_hash": config_hash(vq.model.cfg.to_dict())})
    out = Path(out)
    write_corpus(gen_corpus, out / "corpus")
    with open(out / "motions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "frame", *[f"c{j}" for j in range(raw.shape[2])]])
        for r, m in zip(records, raw):
            for i, row in enumerate(m):
                w.writerow([r.id, i, *[repr(float(v)) for v in row]])
    write_resolved(cfg, out)
    return gen_corpus


def stage_export_features(cfg: RunConfig, corpus_dir, eval_dir, out, vqvae_dir=None) -> Corpus:
    """Evaluation-encoder features per record; with ``vqvae_dir``, time-pooled semantic embeddings instead."""
    corpus = read_corpus(corpus_dir)
    x = np.stack(corpus.data) if len(corpus) else np.zeros((0, 1, corpus.channels), np.float32)
    labels = np.array([[r.age_group, r.gender] for r in corpus.records]).reshape(-1, 2)
    if vqvae_dir is not None:
        vq, meta = load_vqvae(vqvae_dir)
        kind = "semantic_embedding"
        feats = encode_array(vq.model, x).mean(axis=1)
    else:
        fx, meta = load_feature_extractor(eval_dir)
        kind = "eval_encoder"
        feats = motion_features(fx, x)
    check_schema(corpus, meta, kind)
    res = export_features(out, feats, labels, [r.text for r in corpus.records], [r.split for r in corpus.records],
                          [r.id for r in corpus.records], corpus.schema,
                          {"source": kind, "run_config_hash": cfg.hash()})
    write_resolved(cfg, out)
    return res


def stage_verify_bounds(cfg: RunConfig, out, trials: int = 1000, kl_trials: int | None = None) -> dict:
    kl_trials = kl_trials if kl_trials is not None else max(1, trials // 5)
    result = run_bound_suite(trials, kl_trials, cfg.seed)
    result["seed"] = cfg.seed
    write_json(Path(out) / "bounds.json", result)
    return result


def probe_embeddings(vq_model, corpus: Corpus, seed: int = 0) -> dict:
    """Linear probe on time-pooled semantic embeddings: fit on train, score on test."""
    xtr, ltr, _, _ = corpus.arrays("train")
    xte, lte, _, _ = corpus.arrays("test")
    s = encode_array(vq_model, np.concatenate([xtr, xte])).mean(axis=1)
    is_train = np.r_[np.ones(len(xtr), bool), np.zeros(len(xte), bool)]
    return linear_probe(s, np.concatenate([ltr, lte]), is_train, seed)
