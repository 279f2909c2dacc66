"""Sequence rewriter contract and the desk-scale reference model."""
from .beam import Hypothesis, beam_search
from .model import Candidate, GeneratorConfig, GeneratorModel, fit_generator_vocab
from .vocab import BOS, EOS, PAD, UNK, Vocab, fit_vocab


def generate_candidates(model, input_text, n, beam_width=None):
    return model.generate_candidates(input_text, n, beam_width)


def score_candidates(model, input_text, candidates):
    return model.score_candidates(input_text, candidates)


def train_step(model, loss):
    return model.train_step(loss)


def save_model(model, path):
    model.save(path)


def load_model(path):
    return GeneratorModel.load(path)


__all__ = [
    "BOS", "EOS", "PAD", "UNK", "Candidate", "GeneratorConfig", "GeneratorModel",
    "Hypothesis", "Vocab", "beam_search", "fit_generator_vocab", "fit_vocab",
    "generate_candidates", "load_model", "save_model", "score_candidates", "train_step",
]
