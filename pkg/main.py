import sys

from dotenv import load_dotenv

from app.routers.commands import run_command

load_dotenv()


if __name__ == "__main__":
    sys.exit(run_command())
