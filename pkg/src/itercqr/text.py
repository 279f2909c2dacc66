"""Shared tokenizer used by the vocabulary, BM25 and the query analysis."""
import re

SEP = "<sep>"
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", SEP)

_TOKEN_RE = re.compile(r"<(?:sep|unk|pad|bos|eos)>|[^\W_]+")


def tokenize(text):
    """Lowercase and split into alphanumeric runs; ``<sep>``/``<unk>`` survive as single tokens."""
    return _TOKEN_RE.findall(text.lower())


def token_spans(text):
    return [(m.start(), m.end()) for m in _TOKEN_RE.finditer(text.lower())]


def truncate_tokens(text, max_tokens):
    """Cut ``text`` right after its ``max_tokens``-th token."""
    spans = token_spans(text)
    if len(spans) <= max_tokens:
        return text
    return text[: spans[max_tokens - 1][1]].rstrip()
