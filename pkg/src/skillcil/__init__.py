"""Continual imitation learning with retrievable skill adapters.

A desk-scale framework for studying rehearsal-free continual imitation
learning on a compositional point-mass environment: skills are retrieved
by prototype similarity and realized as low-rank adapters over a frozen
base policy.  Includes a baseline suite, transfer metrics, and scenario
streams with unseen-task and unlearning events.
"""

__version__ = "0.1.0"
