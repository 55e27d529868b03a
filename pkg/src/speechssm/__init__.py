"""Selective state-space speech SSL at desk scale.

Subpackages follow the pipeline: numerics -> ssm -> blocks -> pretrain /
asr -> analysis, with bench for the cost harness and cli as the single
entry point.
"""

__version__ = "0.1.0"
