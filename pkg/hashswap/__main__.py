import sys

from hashswap.cli import main

sys.exit(main())
