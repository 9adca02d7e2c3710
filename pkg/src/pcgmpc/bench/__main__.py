import sys

from pcgmpc.bench.cli import main

sys.exit(main())
