"""Key-based block encryption, random ensembles and attacks (C++ core)."""

from ._encvit import (
    Budget,
    Ensemble,
    EncVitError,
    Key,
    KeySet,
    Model,
    decrypt,
    encrypt,
    fgsm,
    generate_key,
    generate_keyset,
    load_dataset,
    load_ensemble,
    load_model,
    make_ensemble,
    pgd_ce,
    pgd_targeted,
    plain_model,
    square_attack,
    synthetic_dataset,
    train_model,
    Weights,
)

__all__ = [
    "Budget",
    "Ensemble",
    "EncVitError",
    "Key",
    "KeySet",
    "Model",
    "decrypt",
    "encrypt",
    "fgsm",
    "generate_key",
    "generate_keyset",
    "load_dataset",
    "load_ensemble",
    "load_model",
    "make_ensemble",
    "pgd_ce",
    "pgd_targeted",
    "plain_model",
    "square_attack",
    "synthetic_dataset",
    "train_model",
    "Weights",
]
