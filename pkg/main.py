"""
deepmeta - Wrapper for running from a source checkout.
Use 'python -m deepmeta' or 'deepmeta' command instead.
"""

import sys
from deepmeta.__main__ import main

if __name__ == "__main__":
    sys.exit(main())
