"""Length-unnormalized beam search over any step-wise decoder.

A decoder provides ``start() -> state``, ``step(state, last_tokens) ->
(logprobs[B, V], state)`` and ``select(state, rows) -> state``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Hypothesis:
    token_ids: tuple[int, ...]  # without <eos>
    logprob: float  # includes the <eos> step
    finished_at: int


def _order_key(h):
    return (-h.logprob, h.finished_at, h.token_ids)


def beam_search(decoder, n, beam_width, max_len, bos_id, eos_id):
    """Top-``n`` finished hypotheses, best first.

    At most ``max_len`` tokens are emitted before ``<eos>``; at step
    ``max_len`` every live beam is force-terminated with ``<eos>``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if beam_width < n:
        raise ValueError(f"beam_width={beam_width} < n={n}")
    state = decoder.start()
    alive_tokens = [()]
    alive_scores = np.zeros(1)
    last = np.array([bos_id])
    finished: list[Hypothesis] = []

    for step in range(max_len + 1):
        logprobs, state = decoder.step(state, last)
        logprobs = np.asarray(logprobs, dtype=np.float64)
        if step == max_len:
            forced = np.full_like(logprobs, -np.inf)
            forced[:, eos_id] = logprobs[:, eos_id]
            logprobs = forced
        total = alive_scores[:, None] + logprobs
        flat = total.ravel()
        vocab = total.shape[1]
        valid = np.flatnonzero(np.isfinite(flat))
        # best score first; ties by beam rank, then token id
        order = valid[np.lexsort((valid % vocab, valid // vocab, -flat[valid]))][:beam_width]

        rows, next_tokens, next_scores, next_last = [], [], [], []
        for idx in order:
            beam, tok = divmod(int(idx), vocab)
            score = float(flat[idx])
            if tok == eos_id:
                finished.append(Hypothesis(alive_tokens[beam], score, step))
            else:
                rows.append(beam)
                next_tokens.append(alive_tokens[beam] + (tok,))
                next_scores.append(score)
                next_last.append(tok)
        if not rows:
            break
        if len(finished) >= n:
            nth = sorted(finished, key=_order_key)[n - 1].logprob
            if max(next_scores) <= nth:
                break
        state = decoder.select(state, np.array(rows))
        alive_tokens, alive_scores, last = next_tokens, np.array(next_scores), np.array(next_last)

    finished.sort(key=_order_key)
    if not finished:
        raise RuntimeError("beam search produced no hypothesis")
    out = finished[:n]
    # search space smaller than n: repeat hypotheses in rank order
    while len(out) < n:
        out.append(out[len(out) % len(finished)])
    return out
