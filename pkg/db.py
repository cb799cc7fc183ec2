from sqlalchemy import create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import DeclarativeBase, sessionmaker


class Base(DeclarativeBase):
    pass


def make_session(db_url):
    engine = create_engine(db_url)
    # Importing registers the tables on Base.metadata
    import models  # noqa: F401

    Base.metadata.create_all(engine)
    return sessionmaker(bind=engine, expire_on_commit=False)()


def commit_or_rollback(session):
    try:
        session.commit()
    except SQLAlchemyError:
        session.rollback()  # Always rollback on error
        raise
