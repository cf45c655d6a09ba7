import sys

from ssdas.cli import main

sys.exit(main())
