import sys

from ccem.cli import main

sys.exit(main())
