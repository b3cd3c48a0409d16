import numpy as np
import pytest

from pbadv.config import Config
from pbadv.dataio import Dataset, Sample, Vocabulary, synth_generate
from pbadv.model import Model, ModelConfig
from pbadv.trainer import Trainer


def tiny_vocab():
    """3 attributes x 3 objects, 6 seen and 2 unseen pairs."""
    return Vocabulary(
        ["red", "old", "wet"],
        ["apple", "car", "dog"],
        [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)],
        [(0, 2), (1, 0)],
    )


def tiny_dataset(seed=0, D=6, per_pair=3):
    rng = np.random.default_rng(seed)
    vocab = tiny_vocab()
    samples = []
    for a, o in vocab.pairs_seen:
        for k in range(per_pair):
            samples.append(Sample(f"tr-{a}-{o}-{k}", a, o, "train"))
    for a, o in vocab.pairs_seen[:2] + vocab.pairs_unseen:
        samples.append(Sample(f"te-{a}-{o}", a, o, "test"))
    feats = rng.standard_normal((len(samples), D)).astype(np.float32)
    return Dataset(vocab, samples, feats)


def tiny_model(seed=0, D=6, word_dim=5, dropout=0.0):
    mc = ModelConfig(feat_dim=D, num_attrs=3, num_objs=3, word_dim=word_dim, hidden=8, embed_dim=16, dropout=dropout, seed=seed)
    return Model(mc)


def ut_zappos_shaped():
    """16 attributes, 12 objects, 83 seen / 18 unseen test / 15 unseen val pairs."""
    attrs = [f"mat{i}" for i in range(16)]
    objs = [f"shoe{j}" for j in range(12)]
    grid = [(a, o) for a in attrs for o in objs]
    seen, unseen, val_unseen = grid[:83], grid[83:101], grid[101:116]
    samples = [{"id": f"tr{i}", "attr": a, "obj": o, "split": "train"} for i, (a, o) in enumerate(seen)]
    samples += [{"id": f"te{i}", "attr": a, "obj": o, "split": "test"} for i, (a, o) in enumerate(seen[:18] + unseen)]
    samples += [{"id": f"va{i}", "attr": a, "obj": o, "split": "val"} for i, (a, o) in enumerate(seen[18:33] + val_unseen)]
    return {
        "attributes": attrs,
        "objects": objs,
        "pairs_seen": [list(p) for p in seen],
        "pairs_unseen": [list(p) for p in unseen],
        "pairs_val_unseen": [list(p) for p in val_unseen],
        "samples": samples,
    }


def small_config(**over):
    config = Config()
    config.train.inv_tau = 20.0
    config.train.batch_size = 32
    for key, value in over.items():
        section, name = key.split("__")
        setattr(getattr(config, section), name, value)
    return config


def synth_model(synth, seed=0, dropout=0.1):
    ds = synth.dataset
    mc = ModelConfig(
        feat_dim=ds.dim,
        num_attrs=ds.vocab.m,
        num_objs=ds.vocab.n,
        word_dim=synth.embeddings.dim,
        dropout=dropout,
        seed=seed,
    )
    return Model.from_embeddings(mc, ds.vocab, synth.embeddings)


@pytest.fixture(scope="session")
def small_synth():
    """A small synthetic dataset shared by several test modules."""
    return synth_generate(4, 5, 16, 0.75, 12, seed=3, word_dim=24)


@pytest.fixture(scope="session")
def trained_toy(small_synth):
    """A toy model trained on ``small_synth`` (base losses, fast lr)."""
    config = small_config(train__lr=1e-3, adv__enabled=False, osp__enabled=False, train__seed=0)
    model = synth_model(small_synth, seed=0)
    Trainer(small_synth.dataset, model, config).fit(40)
    return model, config
