from dataclasses import dataclass

import pytest

import toy
from rmelnet.trainer import Trainer


@dataclass
class ToyRun:
    trainer: Trainer
    history: list
    checkpoint: object

    @property
    def model(self):
        return self.trainer.working.eval()


def _run(bits, tmp_path_factory):
    ckdir = tmp_path_factory.mktemp(f"toy{bits}")
    trainer, history = toy.train(bits, checkpoint_dir=ckdir)
    return ToyRun(trainer, history, ckdir / "last.rmck")


@pytest.fixture(scope="session")
def toy_run32(tmp_path_factory):
    """The overfit 32-bit toy model; trained once per session (several minutes)."""
    return _run(32, tmp_path_factory)


@pytest.fixture(scope="session")
def toy_run16(tmp_path_factory):
    return _run(16, tmp_path_factory)
