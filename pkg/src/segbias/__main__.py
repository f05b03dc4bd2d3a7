import sys

from segbias.cli import main

sys.exit(main())
