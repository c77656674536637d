import os
from dotenv import load_dotenv


class TalRootDirectory:
    @staticmethod
    def root_dir() -> str:
        """
        Get root directory of the project
        """
        return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

    @staticmethod
    def env() -> dict:
        """
        Get environment variables, merged with the optional .env file in the root directory.
        """
        root = TalRootDirectory.root_dir()
        env_path = os.path.join(root, ".env")
        if os.path.exists(env_path):
            load_dotenv(env_path)
        return os.environ
