"""Retrieval rewards and the three training objectives (init NLL, MBR, Top-1 NLL)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch

from .embedding import EmbeddingStore, cosine, encode
from .errors import InvariantError, ValidationError

PHASES = ("init", "mbr", "top1")


def compute_rewards(candidate_texts, gold_passage_ids, store: EmbeddingStore):
    """Per-candidate max cosine against the gold passage embeddings."""
    if not gold_passage_ids:
        raise ValidationError("reward requested for an instance without gold passages")
    missing = [pid for pid in gold_passage_ids if pid not in store]
    if missing:
        raise ValidationError(f"gold passages missing from the embedding store: {missing}")
    golds = [store.vector(pid) for pid in gold_passage_ids]
    rewards = []
    for text in candidate_texts:
        vec = encode(text, store.dim)
        rewards.append(max(cosine(vec, g) for g in golds))
    return rewards


def minmax_normalize(raw):
    """Per-instance min-max scaling to [0, 1]; all-equal input maps to 0.5.

    Results are rounded to 12 decimals so binary representation error does
    not leak into decimal-exact values (0.3 / 0.6 gives 0.5, not 0.49999...).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValidationError("cannot normalize an empty reward vector")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return np.round((raw - lo) / (hi - lo), 12)


def renormalize_probs(logprobs):
    """Softmax over sequence log-probabilities (candidate distribution p~)."""
    if isinstance(logprobs, torch.Tensor):
        return torch.softmax(logprobs, dim=-1)
    x = np.asarray(logprobs, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def mbr_loss(logprobs, rewards):
    """Negative expected reward under the renormalized candidate distribution.

    Works on numpy arrays (returns a float) and on torch tensors (returns a
    differentiable scalar).
    """
    if len(logprobs) != len(rewards):
        raise ValidationError(f"{len(logprobs)} logprobs vs {len(rewards)} rewards")
    if isinstance(logprobs, torch.Tensor):
        r = torch.as_tensor(np.asarray(rewards, dtype=np.float64), dtype=logprobs.dtype)
        return -(renormalize_probs(logprobs) * r).sum()
    return -float(np.dot(renormalize_probs(logprobs), np.asarray(rewards, dtype=np.float64)))


def mbr_gradient(logprobs, rewards):
    """Closed-form dL/ds_j = -p_j (R_j - sum_k p_k R_k)."""
    p = renormalize_probs(logprobs)
    r = np.asarray(rewards, dtype=np.float64)
    return -p * (r - np.dot(p, r))


def select_top1(candidates, raw_rewards):
    """Highest-reward candidate; ties go to the better beam rank."""
    if len(candidates) == 0:
        raise ValidationError("no candidates to select from")
    idx = int(np.argmax(np.asarray(raw_rewards, dtype=np.float64)))
    return idx, candidates[idx]


def nll_loss(model, input_text, target_text):
    """Mean per-token NLL of ``target_text`` given ``input_text``."""
    return model.sequence_nll([input_text], [target_text])[0]


@dataclass
class EpochStats:
    iteration: int
    phase: str
    epoch: int
    mean_loss: float
    skipped_instances: int
    mean_raw_reward: Optional[float]

    def to_dict(self):
        return asdict(self)


def training_examples(dataset_version, instances, phase, store=None):
    """Resolve one dataset version into per-phase training examples.

    Returns ``(examples, skipped, rewards_of_targets)`` where an example is
    ``(input_text, payload)``: a target text for init/top1, or
    ``(candidate_texts, normalized_rewards)`` for mbr.
    """
    if phase not in PHASES:
        raise ValidationError(f"unknown phase {phase!r}")
    if (phase == "init") != (dataset_version.iteration == 0):
        raise ValidationError(f"phase {phase} does not match dataset iteration {dataset_version.iteration}")
    by_id = {inst.instance_id: inst for inst in instances}
    examples, skipped, target_rewards = [], 0, []
    for row in dataset_version.rows:
        inst = by_id[row.instance_id]
        if phase == "init":
            examples.append((inst.model_input, row.target))
            if store is not None and inst.gold_passage_ids:
                target_rewards.append(compute_rewards([row.target], inst.gold_passage_ids, store)[0])
            continue
        cands = row.candidates
        if not inst.gold_passage_ids or cands.rewards is None:
            skipped += 1
            continue
        if phase == "mbr":
            examples.append((inst.model_input, (cands.texts, minmax_normalize(cands.rewards))))
            target_rewards.extend(cands.rewards)
        else:
            idx, text = select_top1(cands.texts, cands.rewards)
            examples.append((inst.model_input, text))
            target_rewards.append(cands.rewards[idx])
    return examples, skipped, target_rewards


def _batch_loss(model, batch, phase):
    if phase == "mbr":
        losses = []
        encoded = model.encode_inputs([inp for inp, _ in batch])
        rows, texts = [], []
        for i, (_, (cand_texts, _)) in enumerate(batch):
            rows += [i] * len(cand_texts)
            texts += list(cand_texts)
        logp, _ = model.token_logprobs(encoded, rows, texts)
        seq = logp.sum(dim=1)
        start = 0
        for _, (cand_texts, norm_rewards) in batch:
            losses.append(mbr_loss(seq[start : start + len(cand_texts)], norm_rewards))
            start += len(cand_texts)
        return torch.stack(losses).mean()
    inputs = [inp for inp, _ in batch]
    return model.sequence_nll(inputs, [tgt for _, tgt in batch]).mean()


def train_epoch(model, dataset_version, instances, phase, batch_size=8, seed=0, epoch=0, store=None):
    """One pass over the dataset version in a seed-determined order."""
    examples, skipped, target_rewards = training_examples(dataset_version, instances, phase, store)
    rng = np.random.default_rng([seed, dataset_version.iteration, epoch])
    order = rng.permutation(len(examples))
    losses = []
    for start in range(0, len(order), batch_size):
        batch = [examples[i] for i in order[start : start + batch_size]]
        loss = _batch_loss(model, batch, phase)
        if not math.isfinite(loss.item()):
            raise InvariantError(
                f"non-finite {phase} loss at iteration {dataset_version.iteration}, epoch {epoch}"
            )
        losses.append(model.train_step(loss) * len(batch))
    mean_loss = sum(losses) / len(examples) if examples else 0.0
    mean_reward = float(np.mean(target_rewards)) if target_rewards else None
    return EpochStats(dataset_version.iteration, phase, epoch, mean_loss, skipped, mean_reward)
