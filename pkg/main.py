#!/usr/bin/env python3
"""InSeGAN - main entry point.

Generates synthetic bin datasets, trains the instance segmentation GAN,
segments depth images and scores them. See ``python main.py --help``.
"""

import sys

from insegan.cli import main

if __name__ == "__main__":
    sys.exit(main())
