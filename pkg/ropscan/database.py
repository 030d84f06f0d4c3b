from functools import lru_cache

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from ropscan.config import get_settings

Base = declarative_base()


@lru_cache
def _engine_for(url: str):
    import ropscan.models  # noqa: F401  registers the tables on Base

    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    engine = create_engine(url, connect_args=connect_args)
    Base.metadata.create_all(bind=engine)
    return engine


def get_engine(url: str | None = None):
    return _engine_for(url or get_settings().db_url)


def get_session(url: str | None = None):
    return sessionmaker(bind=get_engine(url), autoflush=False, autocommit=False)()
