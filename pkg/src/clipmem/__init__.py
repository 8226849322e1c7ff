"""Clip-wise streaming visual compression with a bounded context memory.

The package splits into a numeric kernel (:mod:`.numerics`), the token
layout (:mod:`.layout`), selective attention with its bias builders
(:mod:`.attention`), the toy compressor stack (:mod:`.compressor`), the
relevance-pruned context memory (:mod:`.memory`), the streaming loop and
its file formats (:mod:`.pipeline`, :mod:`.formats`), and the retrieval
evaluation harness plus CLI (:mod:`.harness`, :mod:`.cli`).
"""

__version__ = "0.1.0"
