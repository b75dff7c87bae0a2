import os
import sys
from dotenv import load_dotenv

# Add repository root to path to import the mleann package
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from mleann.main import main
from mleann.storage import close_storage
from mleann.utils import logger


def run():
    """Command-line entry point: python run.py <command> [flags]"""
    load_dotenv()

    try:
        code = main(sys.argv[1:])
    except Exception as e:
        logger.error(f"Fatal error: {str(e)}")
        code = 1
    finally:
        # Close storage connection
        close_storage()

    sys.exit(code)


if __name__ == "__main__":
    run()
