"""Reinforcement-learning lab for reset-state buffer strategies.

The package trains PPO agents on restorable proxy tasks while drawing
episode initial states from buffers of previously visited states.  The
selection strategy behind the buffer is pluggable: uniform, observation
clustering, terminal proximity, value ranking, or a contrastive embedding
trained on per-update value improvement.
"""

__version__ = "0.1.0"
