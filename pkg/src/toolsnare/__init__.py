"""Deterministic red-team simulator for command-injection information theft
in tool-calling agent pipelines: attack-case knowledge base, learnable
command generation, stealth/theft metrics, static baselines, and runtime
defenses over a simulated agent."""

from .agent import (
    AgentBackend,
    RemoteBackend,
    RemoteConfig,
    SimulatedBackend,
    SusceptibilityModel,
    run_inference,
)
from .attack import (
    AttackResult,
    MetricsReport,
    compare_frontends,
    execute_attack,
    fixed_cmd,
    fixed_db_cmd,
    metrics,
    poison_param,
)
from .attackdb import (
    AttackCase,
    AttackDB,
    ToolSummary,
    build_db,
    complete_guidance,
    extract_cases,
    insert_synthetic,
    retrieve,
)
from .cmdgen import (
    CommandGrammar,
    Features,
    GeneratorPolicy,
    RewardBreakdown,
    TrainingLog,
    featurize,
    generate,
    load_policy,
    modal_command,
    optimize_online,
    reinforce_update,
    reward,
    save_policy,
)
from .defenses import (
    DastReport,
    DefenseKind,
    Finding,
    apply_defense,
    dast,
    infer_check,
    param_check,
)
from .harness import (
    APPROACHES,
    run_attack_case,
    run_benchmark,
    run_defense_evaluation,
    train_autocmd,
    write_report,
)
from .model import (
    Command,
    InferenceStep,
    InferenceTrace,
    OutputField,
    PAYLOAD_MARKER,
    ToolParam,
    ToolSpec,
    UserQuery,
    ValueKind,
    chain_pairs,
    inject,
)
from .scenarios import (
    Scenario,
    gen_scenarios,
    load_scenarios,
    load_trip_scenario,
    run_partition,
    save_scenarios,
)
from .sentiment import sentiment

__version__ = "0.1.0"
