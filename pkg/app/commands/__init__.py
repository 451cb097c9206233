"""Sub-commands; each module exposes ``register(subparsers)``."""

from app.commands import cv, featurize, holdout, predict, search, synth, train

COMMANDS = (synth, featurize, cv, search, train, predict, holdout)
