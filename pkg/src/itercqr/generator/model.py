"""Reference query rewriter: GRU encoder-decoder with attention and a copy gate.

Everything runs in float64 so finite-difference checks are meaningful and
CPU runs are bit-reproducible. Source words outside the vocabulary get
per-input extended ids so the decoder can still copy them.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from ..errors import FormatError, InvariantError, ValidationError
from ..text import tokenize
from .beam import beam_search
from .vocab import BOS, EOS, PAD, UNK, Vocab

MODEL_MAGIC = b"ITCQMDL1"
MODEL_FORMAT_VERSION = 1
DTYPE = torch.float64


@dataclass
class GeneratorConfig:
    embedding_size: int = 64
    hidden_size: int = 128
    max_decode_len: int = 32
    max_input_len: int = 128
    learning_rate: float = 1e-5
    grad_clip: float = 5.0
    copy: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size % 2:
            raise ValidationError("hidden_size must be even (bidirectional encoder)")
        if min(self.embedding_size, self.max_decode_len, self.max_input_len) < 1:
            raise ValidationError("sizes must be positive")


@dataclass
class Candidate:
    token_ids: tuple
    text: str
    logprob: float


class PointerSeq2Seq(nn.Module):
    def __init__(self, vocab_size, embedding_size, hidden_size, copy=True):
        super().__init__()
        self.vocab_size = vocab_size
        self.copy = copy
        self.embed = nn.Embedding(vocab_size, embedding_size, padding_idx=PAD)
        self.encoder = nn.GRU(embedding_size, hidden_size // 2, batch_first=True, bidirectional=True)
        self.bridge = nn.Linear(hidden_size, hidden_size)
        self.decoder = nn.GRUCell(embedding_size + hidden_size, hidden_size)
        self.attn = nn.Linear(hidden_size, hidden_size, bias=False)
        self.combine = nn.Linear(2 * hidden_size, hidden_size)
        self.out = nn.Linear(hidden_size, vocab_size)
        self.gate = nn.Linear(2 * hidden_size + embedding_size, 1)
        banned = torch.zeros(vocab_size, dtype=torch.bool)
        banned[[PAD, BOS]] = True
        self.register_buffer("banned", banned, persistent=False)

    def encode(self, src, lengths):
        emb = self.embed(src)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, h_n = self.encoder(packed)
        enc, _ = pad_packed_sequence(out, batch_first=True, total_length=src.shape[1])
        h0 = torch.tanh(self.bridge(torch.cat([h_n[0], h_n[1]], dim=-1)))
        return enc, h0

    def step(self, prev, h, ctx, enc, mask, src_ext, n_ext):
        """One decoder step; returns output probabilities over the extended vocab."""
        emb = self.embed(prev)
        h = self.decoder(torch.cat([emb, ctx], dim=-1), h)
        scores = torch.bmm(enc, self.attn(h).unsqueeze(2)).squeeze(2)
        alpha = torch.softmax(scores.masked_fill(~mask, -math.inf), dim=-1)
        ctx = torch.bmm(alpha.unsqueeze(1), enc).squeeze(1)
        logits = self.out(torch.tanh(self.combine(torch.cat([h, ctx], dim=-1))))
        p_vocab = torch.softmax(logits.masked_fill(self.banned, -math.inf), dim=-1)
        probs = torch.zeros(h.shape[0], self.vocab_size + n_ext, dtype=h.dtype)
        if self.copy:
            g = torch.sigmoid(self.gate(torch.cat([h, ctx, emb], dim=-1)))
            probs[:, : self.vocab_size] = g * p_vocab
            probs = probs.scatter_add(1, src_ext, (1 - g) * alpha)
        else:
            probs[:, : self.vocab_size] = p_vocab
        return probs, h, ctx


@dataclass
class _Encoded:
    enc: torch.Tensor
    h0: torch.Tensor
    mask: torch.Tensor
    src_ext: torch.Tensor
    oovs: list  # per input: list of out-of-vocabulary source words
    n_ext: int


class GeneratorModel:
    """Trainable conditional rewriter with beam generation and teacher-forced scoring."""

    def __init__(self, vocab: Vocab, config: GeneratorConfig | None = None):
        self.vocab = vocab
        self.config = config or GeneratorConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.seed)
            self.net = PointerSeq2Seq(
                len(vocab), self.config.embedding_size, self.config.hidden_size, self.config.copy
            ).to(DTYPE)
        self.reset_optimizer()

    # ----------------------------------------------------------- plumbing

    @property
    def n_parameters(self):
        return sum(p.numel() for p in self.net.parameters())

    def parameters(self):
        return list(self.net.parameters())

    def reset_optimizer(self, learning_rate=None):
        lr = self.config.learning_rate if learning_rate is None else learning_rate
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=lr)

    def _source(self, text):
        tokens = tokenize(text)[: self.config.max_input_len] or ["<unk>"]
        ids, ext, oovs = [], [], []
        for tok in tokens:
            idx = self.vocab.id(tok)
            ids.append(idx)
            if idx == UNK and tok != "<unk>":
                if tok not in oovs:
                    oovs.append(tok)
                ext.append(len(self.vocab) + oovs.index(tok))
            else:
                ext.append(idx)
        return ids, ext, oovs

    def target_ids(self, text, oovs):
        """Extended ids of ``text`` (truncated to the decode budget) plus <eos>."""
        out = []
        for tok in tokenize(text)[: self.config.max_decode_len]:
            idx = self.vocab.id(tok)
            if idx == UNK and tok in oovs:
                idx = len(self.vocab) + oovs.index(tok)
            out.append(idx)
        return out + [EOS]

    def decode(self, ids, oovs):
        words = []
        for idx in ids:
            if idx == EOS:
                break
            words.append(self.vocab.itos[idx] if idx < len(self.vocab) else oovs[idx - len(self.vocab)])
        return " ".join(words)

    def encode_inputs(self, texts):
        sources = [self._source(t) for t in texts]
        width = max(len(s[0]) for s in sources)
        n_ext = max(len(s[2]) for s in sources)
        src = torch.full((len(texts), width), PAD, dtype=torch.long)
        src_ext = torch.zeros((len(texts), width), dtype=torch.long)
        for i, (ids, ext, _) in enumerate(sources):
            src[i, : len(ids)] = torch.tensor(ids)
            src_ext[i, : len(ext)] = torch.tensor(ext)
        lengths = torch.tensor([len(s[0]) for s in sources])
        enc, h0 = self.net.encode(src, lengths)
        return _Encoded(enc, h0, src != PAD, src_ext, [s[2] for s in sources], n_ext)

    # ------------------------------------------------------------ scoring

    def token_logprobs(self, encoded: _Encoded, rows, targets):
        """Teacher-forced per-token log-probs.

        ``rows[i]`` selects the encoded input for ``targets[i]`` (a target
        text). Returns ``(logp[B, L], mask[B, L])``.
        """
        rows_t = torch.as_tensor(rows, dtype=torch.long)
        tgt = [self.target_ids(t, encoded.oovs[r]) for t, r in zip(targets, rows)]
        length = max(len(t) for t in tgt)
        gold = torch.full((len(tgt), length), PAD, dtype=torch.long)
        for i, t in enumerate(tgt):
            gold[i, : len(t)] = torch.tensor(t)
        mask = gold != PAD
        prev = torch.cat([torch.full((len(tgt), 1), BOS, dtype=torch.long), gold[:, :-1]], dim=1)
        prev = prev.masked_fill(prev >= len(self.vocab), UNK)

        enc = encoded.enc.index_select(0, rows_t)
        src_mask = encoded.mask.index_select(0, rows_t)
        src_ext = encoded.src_ext.index_select(0, rows_t)
        h = encoded.h0.index_select(0, rows_t)
        ctx = torch.zeros_like(h)
        steps = []
        for j in range(length):
            probs, h, ctx = self.net.step(prev[:, j], h, ctx, enc, src_mask, src_ext, encoded.n_ext)
            # gather before log: log(0) at unused entries would poison the gradient
            steps.append(probs.gather(1, gold[:, j : j + 1]).squeeze(1))
        p = torch.stack(steps, dim=1)
        logp = torch.where(mask, torch.log(torch.where(mask, p, torch.ones_like(p))), torch.zeros_like(p))
        return logp, mask

    def score_candidates(self, input_text, candidates):
        """Differentiable total log-probability of each candidate text."""
        texts = [c.text if isinstance(c, Candidate) else c for c in candidates]
        encoded = self.encode_inputs([input_text])
        logp, _ = self.token_logprobs(encoded, [0] * len(texts), texts)
        return logp.sum(dim=1)

    def sequence_nll(self, input_texts, target_texts):
        """Mean per-token negative log-likelihood of each target, shape (B,)."""
        for t in target_texts:
            if not tokenize(t):
                raise ValidationError("empty NLL target")
        encoded = self.encode_inputs(input_texts)
        logp, mask = self.token_logprobs(encoded, list(range(len(input_texts))), target_texts)
        return -logp.sum(dim=1) / mask.sum(dim=1)

    # --------------------------------------------------------- generation

    def generate_candidates(self, input_text, n=10, beam_width=None):
        if n <= 0:
            raise ValidationError("n must be positive")
        beam_width = n if beam_width is None else beam_width
        with torch.no_grad():
            decoder = _BeamDecoder(self, self.encode_inputs([input_text]))
            hyps = beam_search(decoder, n, beam_width, self.config.max_decode_len, BOS, EOS)
        oovs = decoder.encoded.oovs[0]
        return [Candidate(h.token_ids, self.decode(h.token_ids, oovs), h.logprob) for h in hyps]

    def greedy(self, input_text):
        """Plain argmax decoding, independent of the beam search."""
        with torch.no_grad():
            decoder = _BeamDecoder(self, self.encode_inputs([input_text]))
            state, last, ids, total = decoder.start(), np.array([BOS]), [], 0.0
            for step in range(self.config.max_decode_len + 1):
                logp, state = decoder.step(state, last)
                if step == self.config.max_decode_len:
                    tok = EOS
                else:
                    tok = int(np.argmax(logp[0]))
                total += float(logp[0, tok])
                if tok == EOS:
                    break
                ids.append(tok)
                last = np.array([tok])
        return Candidate(tuple(ids), self.decode(ids, decoder.encoded.oovs[0]), total)

    def rewrite(self, input_text, beam_width=10):
        return self.generate_candidates(input_text, 1, beam_width)[0].text

    # ----------------------------------------------------------- training

    def train_step(self, loss):
        if not torch.isfinite(loss):
            raise InvariantError(f"non-finite training loss: {loss.item()}")
        self.optimizer.zero_grad()
        loss.backward()
        if self.config.grad_clip:
            nn.utils.clip_grad_norm_(self.net.parameters(), self.config.grad_clip)
        self.optimizer.step()
        return float(loss.item())

    # -------------------------------------------------------- persistence

    def save(self, path):
        state = self.net.state_dict()
        specs, offset, blobs = [], 0, []
        for name, tensor in state.items():
            raw = tensor.detach().cpu().numpy().astype("<f8").tobytes()
            specs.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps(
            {
                "version": MODEL_FORMAT_VERSION,
                "config": asdict(self.config),
                "vocab": self.vocab.to_lines(),
                "min_frequency": self.vocab.min_frequency,
                "params": specs,
            },
            sort_keys=True,
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != MODEL_MAGIC:
            raise FormatError(f"{path}: not a model file")
        try:
            (hlen,) = struct.unpack_from("<I", blob, 8)
            header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt model header") from exc
        if header.get("version") != MODEL_FORMAT_VERSION:
            raise FormatError(f"{path}: model format version {header.get('version')} unsupported")
        vocab = Vocab.from_lines(header["vocab"], header["min_frequency"])
        model = cls(vocab, GeneratorConfig(**header["config"]))
        base = 12 + hlen
        state = {}
        for spec in header["params"]:
            start = base + spec["offset"]
            if start + spec["nbytes"] > len(blob):
                raise FormatError(f"{path}: parameter {spec['name']} truncated")
            arr = np.frombuffer(blob, dtype="<f8", count=spec["nbytes"] // 8, offset=start)
            state[spec["name"]] = torch.from_numpy(arr.reshape(spec["shape"]).copy())
        try:
            model.net.load_state_dict(state)
        except RuntimeError as exc:
            raise FormatError(f"{path}: parameters do not match config ({exc})") from exc
        return model


class _BeamDecoder:
    """Adapts a single encoded input to the beam-search decoder protocol."""

    def __init__(self, model: GeneratorModel, encoded: _Encoded):
        self.model = model
        self.encoded = encoded

    def start(self):
        return self.encoded.h0, torch.zeros_like(self.encoded.h0)

    def step(self, state, last_tokens):
        h, ctx = state
        b = h.shape[0]
        prev = torch.as_tensor(last_tokens, dtype=torch.long)
        prev = prev.masked_fill(prev >= len(self.model.vocab), UNK)
        e = self.encoded
        probs, h, ctx = self.model.net.step(
            prev,
            h,
            ctx,
            e.enc.expand(b, -1, -1),
            e.mask.expand(b, -1),
            e.src_ext.expand(b, -1),
            e.n_ext,
        )
        return torch.log(probs).numpy(), (h, ctx)

    def select(self, state, rows):
        idx = torch.as_tensor(rows, dtype=torch.long)
        return tuple(s.index_select(0, idx) for s in state)


def fit_generator_vocab(instances, targets=(), min_frequency=1):
    from .vocab import fit_vocab

    return fit_vocab([inst.model_input for inst in instances] + list(targets), min_frequency)
