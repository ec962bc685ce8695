from dotenv import load_dotenv

# load environment variables (SRPMOE_SEED may live in .env)
load_dotenv()
