import sys

from sedkit.cli import main

sys.exit(main())
