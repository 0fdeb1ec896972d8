#!/usr/bin/env python
import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from matchlib.cli import main


if __name__ == '__main__':
    sys.exit(main())
