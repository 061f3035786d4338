import sys

from dfnet.cli import main

sys.exit(main())
