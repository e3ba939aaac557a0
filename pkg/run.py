#!/usr/bin/env python3
"""
Launcher script for the ST-SparseGCN toolkit.
This script ensures proper module imports by running from the project root.
"""

import os
import sys

# Add the current directory to Python path BEFORE importing stsparse
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from stsparse.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
