"""scikit-learn style wrappers around the tokenizers, the simulator and the scaling fit."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ValidationError
from .geometry import AgentClass
from .motion_tokens import (NoiseConfig, build_motion_vocab, detokenize, tokenize_track,
                            vocab_training_segments)
from .road_tokens import build_road_vocab, split_polylines, tokenize_map
from .scaling import fit_power_law, predict_loss
from .validation import check_positive_points, check_scenarios, check_tracks


class MotionTokenizer(BaseEstimator, TransformerMixin):
    """Builds a motion vocabulary for one agent class and matches tracks to it.

    ``transform`` returns an int array [n_tracks, n_token_steps] of matched
    token indices with -1 where a step is invalid.
    """

    def __init__(self, agent_class="vehicle", vocab_size=512, epsilon=None, jitter_copies=4, noise=False,
                 noise_k=5, noise_p=0.5, seed=0):
        self.agent_class = agent_class
        self.vocab_size = vocab_size
        self.epsilon = epsilon
        self.jitter_copies = jitter_copies
        self.noise = noise
        self.noise_k = noise_k
        self.noise_p = noise_p
        self.seed = seed

    def fit(self, X, y=None):
        cls = AgentClass(self.agent_class)
        tracks = [t for t in check_tracks(X) if t.agent_class == cls]
        if not tracks:
            raise ValidationError(f"no {cls.value} tracks to fit on")
        segs = vocab_training_segments(tracks, cls, self.jitter_copies, self.epsilon, self.seed)
        if len(segs) == 0:
            raise ValidationError("no track is long enough to yield a motion segment")
        self.vocab_ = build_motion_vocab(segs, cls, self.vocab_size, self.epsilon, self.seed)
        self.n_tokens_ = self.vocab_.size
        return self

    def tokenize(self, X) -> list:
        check_is_fitted(self, "vocab_")
        noise = NoiseConfig(bool(self.noise), self.noise_k, self.noise_p)
        tracks = [t for t in check_tracks(X) if t.agent_class == self.vocab_.agent_class]
        return [tokenize_track(self.vocab_, t, noise, [int(self.seed), i]) for i, t in enumerate(tracks)]

    def transform(self, X):
        toks = self.tokenize(X)
        T = max((len(t.indices) for t in toks), default=0)
        out = np.full((len(toks), T), -1, np.int64)
        for i, t in enumerate(toks):
            out[i, :len(t.indices)] = np.where(t.valid, t.indices, -1)
        return out

    def inverse_transform(self, X, start_states=None):
        """Token rows back to [n, 5T + 1, 3] trajectories from the given (or origin) start poses."""
        check_is_fitted(self, "vocab_")
        X = np.atleast_2d(np.asarray(X, np.int64))
        if (X < 0).any() or (X >= self.vocab_.size).any():
            raise ValidationError("token index out of vocabulary range")
        starts = np.zeros((len(X), 3)) if start_states is None else np.asarray(start_states, float)
        return np.stack([detokenize(self.vocab_, s, row) for s, row in zip(starts, X)])


class RoadTokenizer(BaseEstimator, TransformerMixin):
    """Road vocabulary over <= 5 m lane pieces; ``transform`` returns matched labels per map."""

    def __init__(self, vocab_size=1024, epsilon=0.1, seed=0):
        self.vocab_size = vocab_size
        self.epsilon = epsilon
        self.seed = seed

    def fit(self, X, y=None):
        scenarios = check_scenarios(X)
        segs = [s for sc in scenarios for s in split_polylines(sc.map)]
        self.vocab_ = build_road_vocab(segs, self.vocab_size, self.epsilon, self.seed)
        self.n_tokens_ = self.vocab_.size
        return self

    def tokenize(self, X) -> list:
        check_is_fitted(self, "vocab_")
        return [tokenize_map(self.vocab_, sc.map) for sc in check_scenarios(X)]

    def transform(self, X):
        return [np.array([r.label for r in inst], np.int64) for inst, _ in self.tokenize(X)]


class SMARTSimulator(BaseEstimator):
    """Tokenize, train with next-token prediction, and roll out closed-loop scenarios.

    ``predict`` returns one RolloutSet per scenario and ``score`` the mean
    meta score of those rollouts.
    """

    def __init__(self, preset="smart-1m-tiny", steps=200, lr=2e-4, batch_size=4, dropout=0.1, nat=True, nrvt=True,
                 rvntp=True, rvt=True, motion_vocab_size=512, road_vocab_size=1024, n_rollouts=32, top_k=5,
                 temperature=1.0, seed=0, vocabs=None):
        self.preset = preset
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.dropout = dropout
        self.nat = nat
        self.nrvt = nrvt
        self.rvntp = rvntp
        self.rvt = rvt
        self.motion_vocab_size = motion_vocab_size
        self.road_vocab_size = road_vocab_size
        self.n_rollouts = n_rollouts
        self.top_k = top_k
        self.temperature = temperature
        self.seed = seed
        self.vocabs = vocabs

    def _train_config(self):
        from .training import TrainConfig

        return TrainConfig(lr=self.lr, batch_size=self.batch_size, dropout=self.dropout, max_steps=max(1, self.steps),
                           eval_every=max(1, self.steps), seed=self.seed, rvt=self.rvt, nat=self.nat,
                           nrvt=self.nrvt, rvntp=self.rvntp, model=self.preset)

    def fit(self, X, y=None, validation=None):
        from .scene import build_vocab_set
        from .training import Trainer

        scenarios = check_scenarios(X)
        cfg = self._train_config()
        self.vocabs_ = self.vocabs or build_vocab_set(scenarios, self.motion_vocab_size, self.road_vocab_size,
                                                      seed=self.seed)
        trainer = Trainer(cfg, self.vocabs_, scenarios, check_scenarios(validation) if validation else ())
        self.history_ = trainer.fit(self.steps)
        self.model_ = trainer.model.eval()
        return self

    def _rollout_config(self):
        from .rollout import RolloutConfig

        return RolloutConfig(n_rollouts=self.n_rollouts, top_k=self.top_k, temperature=self.temperature,
                             seed=self.seed)

    def predict(self, X) -> list:
        from .rollout import rollout

        check_is_fitted(self, "model_")
        return [rollout(self.model_, self.vocabs_, s, self._rollout_config()) for s in check_scenarios(X)]

    def evaluate(self, X) -> list:
        from .metrics import evaluate

        scenarios = check_scenarios(X)
        return [evaluate(r, s) for r, s in zip(self.predict(scenarios), scenarios)]

    def score(self, X, y=None) -> float:
        return float(np.mean([r.meta for r in self.evaluate(X)]))

    def save(self, path) -> None:
        from .checkpoint import save_checkpoint

        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.vocabs_, len(self.history_), {"estimator": self.get_params(False)
                                                                               | {"vocabs": None}})

    @classmethod
    def load(cls, path, **params) -> "SMARTSimulator":
        from .checkpoint import load_checkpoint

        model, vocabs, header = load_checkpoint(path)
        saved = dict(header.get("extra", {}).get("estimator", {}))
        saved.pop("vocabs", None)
        est = cls(**(saved | params))
        est.model_, est.vocabs_, est.history_ = model, vocabs, []
        return est


class PowerLawRegressor(BaseEstimator, RegressorMixin):
    """log y = beta log x + alpha by least squares; ``predict`` returns exp(alpha) x^beta."""

    def fit(self, X, y):
        x, yy = check_positive_points(X, y)
        self.fit_ = fit_power_law(list(zip(x, yy)))
        self.beta_, self.alpha_, self.r2_ = self.fit_.beta, self.fit_.alpha, self.fit_.r2
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        x = np.asarray(X, float)
        x = x[:, 0] if x.ndim == 2 else x.reshape(-1)
        return np.asarray(predict_loss(self.fit_, x), float).reshape(-1)


__all__ = ["MotionTokenizer", "RoadTokenizer", "SMARTSimulator", "PowerLawRegressor"]
