"""Decider-guided visual token merging for masked-diffusion decoders.

Submodules: ``numkernel`` (matrix primitives), ``toymodel`` (seeded toy
transformer), ``diffusion`` (decoding loop), ``merge`` (scores, partition,
merging), ``streamscore`` (tiled attention), ``kvcache`` (prefix cache),
``costmodel`` (closed-form FLOPs) and ``cli``.
"""

from .errors import ContractError, D3ToMError, InvalidInput

__version__ = "0.1.0"
__all__ = ["ContractError", "D3ToMError", "InvalidInput", "__version__"]
