"""Fixture databases, corpora and a scripted model backend shared by the test suites."""

from __future__ import annotations

import json
import pathlib
import sqlite3
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from tasql.llm import DecodingConfig
from tasql.schema_catalog import ColumnDef, ColumnRef, FkLink, SchemaCatalog, TableDef, introspect_database
from tasql.talog import RETRY_REMINDER

SCHEMAS: Dict[str, str] = {
    "california_schools": """
        CREATE TABLE schools (CDSCode TEXT PRIMARY KEY, County TEXT, District TEXT, School TEXT, StatusType TEXT);
        CREATE TABLE satscores (
            cds TEXT PRIMARY KEY REFERENCES schools(CDSCode), sname TEXT, dname TEXT,
            NumTstTakr INTEGER, AvgScrRead INTEGER, AvgScrMath INTEGER);
        CREATE TABLE frpm (
            CDSCode TEXT PRIMARY KEY REFERENCES schools(CDSCode), "County Name" TEXT,
            "Enrollment (K-12)" REAL, "Free Meal Count (K-12)" REAL);
    """,
    "debit_card_specializing": """
        CREATE TABLE customers (CustomerID INTEGER PRIMARY KEY, Segment TEXT, Currency TEXT);
        CREATE TABLE gasstations (GasStationID INTEGER PRIMARY KEY, ChainID INTEGER, Country TEXT, Segment TEXT);
        CREATE TABLE products (ProductID INTEGER PRIMARY KEY, Description TEXT);
        CREATE TABLE transactions_1k (
            TransactionID INTEGER PRIMARY KEY, Date DATE, Time TEXT,
            CustomerID INTEGER REFERENCES customers(CustomerID), CardID INTEGER,
            GasStationID INTEGER REFERENCES gasstations(GasStationID),
            ProductID INTEGER REFERENCES products(ProductID), Amount INTEGER, Price REAL);
        CREATE TABLE yearmonth (
            CustomerID INTEGER REFERENCES customers(CustomerID), Date TEXT, Consumption REAL,
            PRIMARY KEY (CustomerID, Date));
    """,
    "card_games": """
        CREATE TABLE sets (id INTEGER PRIMARY KEY, code TEXT UNIQUE, name TEXT, block TEXT, baseSetSize INTEGER);
        CREATE TABLE set_translations (
            id INTEGER PRIMARY KEY, language TEXT, setCode TEXT REFERENCES sets(code), translation TEXT);
    """,
    "european_football_2": """
        CREATE TABLE Player (
            id INTEGER PRIMARY KEY, player_api_id INTEGER UNIQUE, player_name TEXT,
            birthday TEXT, height REAL, weight INTEGER);
        CREATE TABLE Player_Attributes (
            id INTEGER PRIMARY KEY, player_api_id INTEGER REFERENCES Player(player_api_id),
            overall_rating INTEGER, date TEXT);
    """,
    "superhero": """
        CREATE TABLE colour (id INTEGER PRIMARY KEY, colour TEXT);
        CREATE TABLE gender (id INTEGER PRIMARY KEY, gender TEXT);
        CREATE TABLE race (id INTEGER PRIMARY KEY, race TEXT);
        CREATE TABLE superhero (
            id INTEGER PRIMARY KEY, superhero_name TEXT,
            gender_id INTEGER REFERENCES gender(id), hair_colour_id INTEGER REFERENCES colour(id),
            race_id INTEGER REFERENCES race(id), height_cm INTEGER);
    """,
    "toxicology": """
        CREATE TABLE molecule (molecule_id TEXT PRIMARY KEY, label TEXT);
        CREATE TABLE atom (atom_id TEXT PRIMARY KEY, molecule_id TEXT REFERENCES molecule(molecule_id), element TEXT);
        CREATE TABLE bond (bond_id TEXT PRIMARY KEY, molecule_id TEXT REFERENCES molecule(molecule_id), bond_type TEXT);
        CREATE TABLE connected (
            atom_id TEXT REFERENCES atom(atom_id), atom_id2 TEXT REFERENCES atom(atom_id),
            bond_id TEXT REFERENCES bond(bond_id), PRIMARY KEY (atom_id, atom_id2));
    """,
    "codebase_community": """
        CREATE TABLE users (Id INTEGER PRIMARY KEY, DisplayName TEXT, Reputation INTEGER);
        CREATE TABLE posts (
            Id INTEGER PRIMARY KEY, OwnerUserId INTEGER REFERENCES users(Id), Title TEXT,
            FavoriteCount INTEGER, Score INTEGER);
        CREATE TABLE votes (
            Id INTEGER PRIMARY KEY, PostId INTEGER REFERENCES posts(Id),
            UserId INTEGER REFERENCES users(Id), VoteTypeId INTEGER);
    """,
    "student_club": """
        CREATE TABLE member (member_id TEXT PRIMARY KEY, first_name TEXT, position TEXT);
        CREATE TABLE income (
            income_id TEXT PRIMARY KEY, date_received TEXT, amount INTEGER, source TEXT,
            link_to_member TEXT REFERENCES member(member_id));
    """,
}

ROWS: Dict[str, Dict[str, List[tuple]]] = {
    "california_schools": {
        "schools": [
            ("01100170109835", "Alameda", "Alameda Unified", "Alameda High", "Active"),
            ("01100170112607", "Alameda", "Oakland Unified", "Oakland Tech", "Active"),
            ("01100170118489", "Alameda", "Berkeley Unified", "Berkeley High", "Closed"),
            ("19647330100289", "Los Angeles", "Los Angeles Unified", "Garfield High", "Active"),
            ("19647330100743", "Los Angeles", "Los Angeles Unified", "Roosevelt High", "Merged"),
        ],
        "satscores": [
            ("01100170109835", "Alameda High", "Alameda Unified", 120, 520, 540),
            ("01100170112607", "Oakland Tech", "Oakland Unified", 95, 480, 470),
            ("01100170118489", "Berkeley High", "Berkeley Unified", 210, 600, 610),
            ("19647330100289", "Garfield High", "Los Angeles Unified", 300, 455, 460),
            ("19647330100743", "Roosevelt High", "Los Angeles Unified", 150, 430, None),
        ],
        "frpm": [
            ("01100170109835", "Alameda", 1200.0, 300.0),
            ("01100170112607", "Alameda", 900.0, 450.0),
            ("19647330100289", "Los Angeles", 2500.0, 2000.0),
        ],
    },
    "debit_card_specializing": {
        "customers": [(1, "SME", "EUR"), (2, "LAM", "CZK"), (3, "KAM", "CZK"), (4, "SME", "EUR"), (5, "LAM", "CZK")],
        "gasstations": [(10, 1, "CZE", "Value for money"), (11, 2, "SVK", "Premium"), (12, 1, "CZE", "Premium")],
        "products": [(100, "Natural"), (101, "Diesel"), (102, "Special")],
        "transactions_1k": [
            (1, "2012-08-25", "09:41:00", 1, 7001, 10, 100, 2, 30.5),
            (2, "2012-08-25", "10:02:00", 2, 7002, 11, 101, 5, 62.0),
            (3, "2012-08-25", "11:15:00", 3, 7003, 10, 101, 1, 14.25),
            (4, "2012-08-25", "12:30:00", 5, 7005, 12, 102, 3, 45.0),
            (5, "2012-08-24", "08:00:00", 4, 7004, 12, 100, 4, 51.0),
            (6, "2012-08-26", "17:45:00", 1, 7001, 11, 102, 2, 28.0),
            (7, "2012-08-24", "19:10:00", 2, 7002, 10, 100, 6, 80.0),
        ],
        "yearmonth": [(1, "201208", 512.5), (2, "201208", 98.0), (4, "201208", 1200.0), (1, "201209", 433.0)],
    },
    "card_games": {
        "sets": [
            (1, "RAV", "Ravnica: City of Guilds", "Ravnica", 180),
            (2, "GPT", "Guildpact", "Ravnica", 165),
            (3, "ALA", "Shards of Alara", "Alara", 249),
        ],
        "set_translations": [
            (1, "Italian", "RAV", "Ravnica: Citta delle Gilde"),
            (2, "Japanese", "RAV", "Ravnica"),
            (3, "French", "GPT", "Pacte des guildes"),
        ],
    },
    "european_football_2": {
        "Player": [
            (1, 505942, "Aaron Appindangoye", "1992-02-29", 182.88, 187),
            (2, 155782, "Aaron Cresswell", "1989-12-15", 170.18, 146),
            (3, 162549, "Kristof van Hout", "1987-02-09", 208.28, 243),
        ],
        "Player_Attributes": [(1, 505942, 67, "2016-02-18"), (2, 155782, 74, "2016-04-21")],
    },
    "superhero": {
        "colour": [(1, "No Colour"), (7, "Blue"), (9, "Black"), (14, "Blond")],
        "gender": [(1, "Male"), (2, "Female")],
        "race": [(1, "Human"), (2, "Mutant"), (3, "Atlantean")],
        "superhero": [
            (1, "Aquaman", 1, 14, 3, 185),
            (2, "Beast", 1, 7, 2, 180),
            (3, "Mystique", 2, 7, 2, 178),
            (4, "Batman", 1, 9, 1, 188),
        ],
    },
    "toxicology": {
        "molecule": [("TR000", "+"), ("TR001", "-")],
        "atom": [("TR000_1", "TR000", "te"), ("TR000_2", "TR000", "cl"), ("TR001_1", "TR001", "c")],
        "bond": [("TR000_1_2", "TR000", "-"), ("TR001_1_1", "TR001", "=")],
        "connected": [("TR000_1", "TR000_2", "TR000_1_2")],
    },
    "codebase_community": {
        "users": [(14, "Alice", 120), (15, "Bob", 60)],
        "posts": [(1, 14, "How to join", 3, 10), (2, 15, "Window functions", 7, 22), (3, 15, "Indexes", 1, 2)],
        "votes": [(1, 1, 14, 2), (2, 2, 14, 2), (3, 3, 15, 2), (4, 2, 15, 5)],
    },
    "student_club": {
        "member": [("rec1", "Angela", "Member"), ("rec2", "Grant", "President"), ("rec3", "Luisa", "Member")],
        "income": [
            ("in1", "2019-10-17", 50, "Dues", "rec1"),
            ("in2", "2019-10-20", 50, "Dues", "rec3"),
            ("in3", "2019-11-02", 200, "Fundraising", "rec1"),
            ("in4", "2019-09-14", 3000, "School Appropration", "rec2"),
        ],
    },
}


# ------------------------------
# Databases
# ------------------------------

def make_db(path: pathlib.Path, ddl: str, rows: Dict[str, Sequence[tuple]]) -> pathlib.Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(path)
    try:
        conn.executescript(ddl)
        for table, data in rows.items():
            if not data:
                continue
            marks = ", ".join("?" for _ in data[0])
            conn.executemany(f'INSERT INTO "{table}" VALUES ({marks})', data)
        conn.commit()
    finally:
        conn.close()
    return path


def build_database(root: pathlib.Path, db_id: str) -> pathlib.Path:
    """{root}/{db_id}/{db_id}.sqlite, the benchmark layout."""
    return make_db(pathlib.Path(root) / db_id / f"{db_id}.sqlite", SCHEMAS[db_id], ROWS[db_id])


def build_catalog(root: pathlib.Path, db_id: str) -> SchemaCatalog:
    return introspect_database(build_database(root, db_id), db_id=db_id)


def write_descriptions(db_file: pathlib.Path, table: str, rows: Iterable[Tuple[str, str, str, str]]) -> pathlib.Path:
    """BIRD-style description CSV: original_column_name, column_name, column_description, value_description."""
    out = db_file.parent / "database_description" / f"{table}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["original_column_name,column_name,column_description,value_description"]
    for r in rows:
        lines.append(",".join(f'"{v}"' for v in r))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


# ------------------------------
# Synthetic FK graphs
# ------------------------------

def graph_catalog(n_tables: int, edges: Iterable[Tuple[int, int]], db_id: str = "graph") -> SchemaCatalog:
    """Tables t0..t{n-1}; edge (i, j) adds column t{j}_id_{k} to t{i} referencing t{j}.id."""
    cols: Dict[int, List[ColumnDef]] = {i: [ColumnDef("id", "INTEGER")] for i in range(n_tables)}
    links: List[FkLink] = []
    for k, (i, j) in enumerate(edges):
        name = f"t{j}_id_{k}"
        cols[i].append(ColumnDef(name, "INTEGER"))
        links.append(FkLink(ColumnRef(f"t{i}", name), ColumnRef(f"t{j}", "id")))
    tables = tuple(TableDef(f"t{i}", tuple(cols[i]), ("id",)) for i in range(n_tables))
    return SchemaCatalog(db_id=db_id, tables=tables, foreign_keys=tuple(links))


# ------------------------------
# Worked cases
# ------------------------------

CASE1 = {
    "question_id": 0,
    "db_id": "california_schools",
    "question": "Which active district has the highest average score in Reading?",
    "evidence": "",
    "SQL": (
        "SELECT T1.District FROM schools AS T1 INNER JOIN satscores AS T2 ON T1.CDSCode = T2.cds "
        "WHERE T1.StatusType = 'Active' ORDER BY T2.AvgScrRead DESC LIMIT 1"
    ),
    "difficulty": "simple",
}
CASE1_PLAN = (
    "df1 = df.where(element = schools.StatusType, filter = 'Active')\n"
    "df2 = df1.orderby(by = satscores.AvgScrRead, desc).limit(1)\n"
    "res = df2.select(schools.District)"
)
CASE1_EXPECTED_SQL = (
    "SELECT schools.District FROM satscores INNER JOIN schools ON satscores.cds = schools.CDSCode "
    "WHERE schools.StatusType = 'Active' ORDER BY satscores.AvgScrRead DESC LIMIT 1"
)

CASE2 = {
    "question_id": 1,
    "db_id": "debit_card_specializing",
    "question": "What is the percentage of the customers who used EUR in 2012/8/25?",
    "evidence": "'2012/8/25' can be represented by '2012-08-25'",
    "SQL": (
        "SELECT CAST(SUM(IIF(T2.Currency = 'EUR', 1, 0)) AS FLOAT) * 100 / COUNT(T1.CustomerID) "
        "FROM transactions_1k AS T1 INNER JOIN customers AS T2 ON T1.CustomerID = T2.CustomerID "
        "WHERE T1.Date = '2012-08-25'"
    ),
    "difficulty": "moderate",
}
CASE2_PLAN = (
    "df1 = df.where(element = transactions_1k.Date, filter = '2012-08-25')\n"
    "df2 = df1.where(element = customers.Currency, filter = 'EUR')\n"
    "res = df.select(cast(df2.count(), real) * 100 / df1.count())"
)

# (category, db_id, gold, wrong) per hallucination category
HALLUCINATION_CASES: List[Tuple[str, str, str, str]] = [
    (
        "SchemaContradiction",
        "card_games",
        "SELECT T2.language FROM sets AS T1 INNER JOIN set_translations AS T2 ON T1.code = T2.setCode "
        "WHERE T1.block = 'Ravnica' AND T1.baseSetSize = 180",
        "SELECT language FROM sets WHERE baseSetSize = 180 AND block = 'Ravnica'",
    ),
    (
        "AttributeOveranalysis",
        "european_football_2",
        "SELECT player_name FROM Player ORDER BY height DESC LIMIT 1",
        "SELECT player_name, height FROM Player ORDER BY height DESC LIMIT 1",
    ),
    (
        "ValueMisrepresentation",
        "superhero",
        "SELECT T3.race FROM superhero AS T1 INNER JOIN colour AS T2 ON T1.hair_colour_id = T2.id "
        "INNER JOIN race AS T3 ON T1.race_id = T3.id INNER JOIN gender AS T4 ON T1.gender_id = T4.id "
        "WHERE T2.colour = 'Blue' AND T4.gender = 'Male'",
        "SELECT T3.race FROM superhero AS T1 INNER JOIN colour AS T2 ON T1.hair_colour_id = T2.id "
        "INNER JOIN race AS T3 ON T1.race_id = T3.id INNER JOIN gender AS T4 ON T1.gender_id = T4.id "
        "WHERE T2.colour = 'blue' AND T4.gender = 'M'",
    ),
    (
        "JoinRedundancy",
        "toxicology",
        "SELECT T2.bond_type FROM atom AS T1 INNER JOIN bond AS T2 ON T1.molecule_id = T2.molecule_id "
        "WHERE T1.element = 'te'",
        "SELECT bond_type FROM bond INNER JOIN connected ON bond.bond_id = connected.bond_id "
        "INNER JOIN atom ON connected.atom_id = atom.atom_id WHERE atom.element = 'te'",
    ),
    (
        "ClauseAbuse",
        "codebase_community",
        "SELECT T2.Id FROM votes AS T1 INNER JOIN posts AS T2 ON T1.PostId = T2.Id "
        "WHERE T1.UserId = 14 ORDER BY T2.FavoriteCount DESC LIMIT 1",
        "SELECT T2.Id FROM votes AS T1 INNER JOIN posts AS T2 ON T1.PostId = T2.Id "
        "WHERE T1.UserId = 14 GROUP BY T2.Id ORDER BY T2.FavoriteCount DESC LIMIT 1",
    ),
    (
        "MathematicalDelusion",
        "student_club",
        "SELECT CAST(SUM(CASE WHEN T2.amount = 50 THEN 1.0 ELSE 0 END) AS REAL) * 100 / COUNT(T2.income_id) "
        "FROM member AS T1 INNER JOIN income AS T2 ON T1.member_id = T2.link_to_member "
        "WHERE T1.position = 'Member'",
        "SELECT DIVIDE(SUM(CASE WHEN T2.amount = 50 THEN 1 ELSE 0 END), COUNT(T1.member_id)) "
        "FROM member AS T1 INNER JOIN income AS T2 ON T1.member_id = T2.link_to_member "
        "WHERE T1.position = 'Member'",
    ),
]


def write_corpus(path: pathlib.Path, records: Sequence[dict]) -> pathlib.Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(list(records), indent=2), encoding="utf-8")
    return path


# ------------------------------
# Scripted model
# ------------------------------

SUCCINCT_REPLY = "identifier or attribute of the row; short text or number"


def prompt_question(prompt: str) -> str:
    """The question of the final (non-demonstration) block of a prompt."""
    tail = prompt.rsplit("### Question\n", 1)[-1]
    return tail.split("\n", 1)[0].strip()


class ScriptedBackend:
    """
    Answers by prompt stage: dummy SQL for schema linking, a symbolic plan for synthesis,
    a fixed line for column descriptions. Unknown questions get `default`.
    """

    def __init__(
        self,
        dummy_sql: Dict[str, str],
        plans: Dict[str, str],
        default: str = "I cannot answer that.",
        retry_plans: Optional[Dict[str, str]] = None,
    ):
        self.dummy_sql = dummy_sql
        self.plans = plans
        self.retry_plans = retry_plans or {}
        self.default = default
        self.calls: List[str] = []

    def complete(self, prompt: str, config: DecodingConfig, model: str) -> str:
        self.calls.append(prompt)
        body = prompt.rstrip()
        if body.endswith("Succinct description:"):
            return SUCCINCT_REPLY
        question = prompt_question(prompt)
        if body.endswith(RETRY_REMINDER):
            return self.retry_plans.get(question, self.default)
        if body.endswith("### Symbolic representation"):
            return self.plans.get(question, self.default)
        if body.endswith("### SQL"):
            return self.dummy_sql.get(question, self.default)
        return self.default


def case_backend(extra_sql: Optional[Dict[str, str]] = None, extra_plans: Optional[Dict[str, str]] = None) -> ScriptedBackend:
    sql = {CASE1["question"]: f"```sql\n{CASE1['SQL']};\n```", CASE2["question"]: CASE2["SQL"]}
    plans = {CASE1["question"]: CASE1_PLAN, CASE2["question"]: f"```python\n{CASE2_PLAN}\n```"}
    sql.update(extra_sql or {})
    plans.update(extra_plans or {})
    return ScriptedBackend(sql, plans)
