"""hybridkit: a desk-scale laboratory for attention-RNN hybrid language models.

Keep this module import-light: the CLI must be able to configure thread
counts before numpy is loaded.
"""

__version__ = "0.1.0"
