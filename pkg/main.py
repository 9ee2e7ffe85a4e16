import sys
from main_modules.cli import SymmetryCLI

def main():
    return SymmetryCLI().run(sys.argv[1:])

if __name__ == '__main__':
    sys.exit(main())
