"""Glue between manifests, the model, the trainer and the evaluator."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .dataio import DatasetManifest, encode, manifest_nmax
from .embeddings import EmbeddingTable
from .evaluate import EvalReport, classification_map, retrieval_map
from .model import ModelConfig, ModelParams, extract_retrieval_feature, predict
from .trainer import TrainConfig, TrainResult, train


def fit(manifest: DatasetManifest, table: EmbeddingTable, model_config: ModelConfig,
        train_config: TrainConfig) -> TrainResult:
    if model_config.v_dim != manifest.v_dim or model_config.t_dim != table.dim:
        raise ValueError(f"model dims (v={model_config.v_dim}, t={model_config.t_dim}) do not match "
                         f"data (v={manifest.v_dim}, t={table.dim})")
    if model_config.num_classes != manifest.num_classes:
        raise ValueError(f"model has {model_config.num_classes} classes, manifest {manifest.num_classes}")
    train_samples = manifest.split("train")
    if not train_samples:
        raise ValueError("manifest has no training samples")
    n_max = manifest_nmax(manifest, table)
    model_config = replace(model_config, n_max=n_max)
    return train(model_config, train_config, encode(train_samples, table, n_max))


def check_compatible(params: ModelParams, manifest: DatasetManifest, table: EmbeddingTable) -> None:
    cfg = params.config
    if cfg.v_dim != manifest.v_dim or cfg.t_dim != table.dim or cfg.num_classes != manifest.num_classes:
        raise ValueError(f"checkpoint (v={cfg.v_dim}, t={cfg.t_dim}, K={cfg.num_classes}) does not match "
                         f"manifest/embeddings (v={manifest.v_dim}, t={table.dim}, K={manifest.num_classes})")


def encode_split(params: ModelParams, manifest: DatasetManifest, table: EmbeddingTable, split: str):
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    return encode(samples, table, params.config.n_max or manifest_nmax(manifest, table))


def classify(params: ModelParams, manifest: DatasetManifest, table: EmbeddingTable, split: str):
    """Returns (report, batch, predicted classes, scores)."""
    batch = encode_split(params, manifest, table, split)
    classes, scores = predict(params, batch)
    report = classification_map(scores, batch.labels, manifest.num_classes)
    return report, batch, classes, scores


def accuracy(params: ModelParams, manifest: DatasetManifest, table: EmbeddingTable, split: str) -> float:
    _, batch, classes, _ = classify(params, manifest, table, split)
    return float(np.mean(classes == batch.labels))


def retrieve(params: ModelParams, manifest: DatasetManifest, table: EmbeddingTable) -> EvalReport:
    """Test split as queries against the train split as search set."""
    queries = encode_split(params, manifest, table, "test")
    search = encode_split(params, manifest, table, "train")
    return retrieval_map(extract_retrieval_feature(params, queries), queries.labels,
                         extract_retrieval_feature(params, search), search.labels)
