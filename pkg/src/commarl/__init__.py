"""Cooperative multi-agent Q-learning with gated inter-agent messaging.

Subpackages cover a minimal differentiable core (:mod:`commarl.diffnet`), two
seeded gridworld scenarios (:mod:`commarl.env`), the per-agent messaging
protocol (:mod:`commarl.agent`), a Markov burst-loss channel
(:mod:`commarl.channel`), centralized VDN training (:mod:`commarl.training`),
experiment measurements (:mod:`commarl.metrics`) and a CLI (:mod:`commarl.cli`).
"""

__version__ = "0.1.0"
