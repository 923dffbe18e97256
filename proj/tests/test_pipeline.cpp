#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "mcg/pipeline.hpp"

using namespace mcg;
using namespace mcg::pipeline;
namespace fs = std::filesystem;

namespace {

nlohmann::json micro_overlay() {
    return nlohmann::json::parse(R"({
      "corpus": {"per_attr_count": 30},
      "model": {"d_h": 8, "disent_hidden": 12, "prefix_hidden": 16,
                "encoder": {"d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "max_len": 24},
                "decoder": {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32, "max_len": 64, "prefix_len": 2}},
      "pretrain": {"epochs": 2},
      "scorer": {"epochs": 4},
      "train": {"epochs": 2, "lr": 0.002},
      "generate": {"k": 5, "max_len": 12, "repetitions": 1}
    })");
}

RunConfig micro_config(std::uint64_t seed = 3) {
    nlohmann::json cli;
    cli["seed"] = seed;
    return resolve_config("desk", micro_overlay(), cli);
}

struct TempRoot {
    fs::path path;
    explicit TempRoot(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
    }
    ~TempRoot() { fs::remove_all(path); }
};

std::map<std::string, StageStatus> status_map(const PipelineResult& r) {
    std::map<std::string, StageStatus> m;
    for (const auto& s : r.stages) {
        m[s.name] = s.status;
    }
    return m;
}

}  // namespace

TEST_CASE("config resolution: precedence, presets, digest stability") {
    const RunConfig desk = preset_config("desk");
    CHECK(desk.per_attr_count == 500);
    CHECK(desk.train.epochs == 20);
    CHECK(desk.train.batch_size == 32);

    const RunConfig paper = preset_config("paper");
    CHECK(paper.train.epochs == 300);
    CHECK(paper.train.batch_size == 64);
    CHECK(paper.train.lr == 1e-4);
    CHECK(paper.model.prefix_shape().dims() == std::vector<int>{20, 24, 2, 1024});

    CHECK_THROWS_WITH_AS(preset_config("giant"),
                         "unknown preset 'giant' (valid presets: desk, paper)",
                         std::invalid_argument);

    // File overlay overrides the preset; the CLI overlay overrides the file.
    nlohmann::json file;
    file["train"]["epochs"] = 5;
    file["generate"]["k"] = 9;
    nlohmann::json cli;
    cli["train"]["epochs"] = 2;
    const RunConfig merged = resolve_config("desk", file, cli);
    CHECK(merged.train.epochs == 2);
    CHECK(merged.k == 9);
    CHECK(merged.per_attr_count == 500);

    CHECK(merged.digest() == resolve_config("desk", file, cli).digest());
    CHECK(merged.digest() != preset_config("desk").digest());

    // The config document round-trips.
    const RunConfig back = RunConfig::from_json(merged.to_json());
    CHECK(back.to_json() == merged.to_json());
}

TEST_CASE("shipped desk schema file matches the built-in schema") {
    const auto from_file = corpus::AttributeSchema::load(
        fs::path(TEST_SOURCE_DIR) / ".." / "data" / "schema_desk.json");
    CHECK(from_file.hash() == corpus::desk_schema().hash());
}

TEST_CASE("pipeline: idempotent reruns and stage-graph invalidation") {
    TempRoot root("mcg_pipe_idem");
    Pipeline pipe(micro_config(), root.path);

    const auto first = status_map(pipe.run(kAllStages));
    for (const auto& [name, status] : first) {
        CHECK(status == StageStatus::Ran);
    }

    // Unchanged config: everything skips.
    const auto second = status_map(pipe.run(kAllStages));
    for (const auto& [name, status] : second) {
        CHECK(status == StageStatus::Skipped);
    }

    // Deleting the space file invalidates space and its dependents only.
    fs::remove(pipe.space_path());
    const auto third = status_map(pipe.run(kAllStages));
    CHECK(third.at("corpus") == StageStatus::Skipped);
    CHECK(third.at("pretrain") == StageStatus::Skipped);
    CHECK(third.at("train") == StageStatus::Skipped);
    CHECK(third.at("space") == StageStatus::Ran);
    CHECK(third.at("generate") == StageStatus::Ran);
    CHECK(third.at("eval") == StageStatus::Ran);

    // A config change in one stage's slice reruns from that stage onward.
    RunConfig changed = micro_config();
    changed.k = 4;
    Pipeline pipe2(changed, root.path);
    const auto fourth = status_map(pipe2.run(kAllStages));
    CHECK(fourth.at("corpus") == StageStatus::Skipped);
    CHECK(fourth.at("train") == StageStatus::Skipped);
    CHECK(fourth.at("space") == StageStatus::Skipped);
    CHECK(fourth.at("generate") == StageStatus::Ran);
    CHECK(fourth.at("eval") == StageStatus::Ran);

    // Force reruns everything.
    const auto fifth = status_map(pipe2.run(kAllStages, /*force=*/true));
    for (const auto& [name, status] : fifth) {
        CHECK(status == StageStatus::Ran);
    }
}

TEST_CASE("missing upstream artifacts name the stage to run first") {
    TempRoot root("mcg_pipe_missing");
    Pipeline pipe(micro_config(), root.path);
    CHECK_THROWS_WITH_AS(pipe.run({"train"}),
                         "stage 'train': missing input 'corpus'; run stage 'corpus' first",
                         std::runtime_error);
    pipe.run({"corpus"});
    CHECK_THROWS_WITH_AS(pipe.run({"train"}),
                         "stage 'train': missing input 'decoder'; run stage 'pretrain' first",
                         std::runtime_error);
}

TEST_CASE("artifacts carry the resolved config digest and schema hash") {
    TempRoot root("mcg_pipe_digest");
    const RunConfig cfg = micro_config();
    Pipeline pipe(cfg, root.path);
    pipe.run(kAllStages);

    const auto corpus_file = corpus::load_corpus(pipe.corpus_path());
    CHECK(corpus_file.run_config_digest == cfg.digest());

    const auto dec_info = net::read_checkpoint_info(pipe.decoder_dir());
    CHECK(dec_info.run_config_digest == cfg.digest());
    CHECK(dec_info.schema_hash == corpus_file.schema.hash());

    const auto ckpt_info = net::read_checkpoint_info(pipe.checkpoint_dir());
    CHECK(ckpt_info.run_config_digest == cfg.digest());

    const auto store = space::load_space(pipe.space_path());
    CHECK(store.run_config_digest() == cfg.digest());
    CHECK(store.schema_hash() == corpus_file.schema.hash());
}

TEST_CASE("pipeline is deterministic across roots for the same seed") {
    TempRoot a("mcg_pipe_det_a");
    TempRoot b("mcg_pipe_det_b");
    Pipeline pa(micro_config(11), a.path);
    Pipeline pb(micro_config(11), b.path);
    pa.run(kAllStages);
    pb.run(kAllStages);

    for (const std::string rel : {"corpus/corpus.jsonl", "space/space.bin",
                                  "gen/results.jsonl", "eval/report.json",
                                  "eval/diagnostics.json"}) {
        CHECK(read_text_file(a.path / rel) == read_text_file(b.path / rel));
    }
    for (const std::string rel :
         {"decoder/tensors.bin", "scorer/tensors.bin", "model/ckpt_best/tensors.bin",
          "model/ckpt_final/tensors.bin"}) {
        CHECK(read_text_file(a.path / rel) == read_text_file(b.path / rel));
    }

    // A different seed diverges.
    TempRoot c("mcg_pipe_det_c");
    Pipeline pc(micro_config(12), c.path);
    pc.run(kAllStages);
    CHECK(read_text_file(a.path / "corpus/corpus.jsonl") !=
          read_text_file(c.path / "corpus/corpus.jsonl"));
}

TEST_CASE("default protocol enumerates all attribute combinations") {
    const RunConfig cfg = micro_config();
    Pipeline pipe(cfg, fs::temp_directory_path() / "mcg_pipe_proto");
    const auto protocol = pipe.default_protocol(cfg.schema());
    CHECK(protocol.combinations.size() == 4);  // 2 topics x 2 sentiments
    CHECK(protocol.prompts.size() == 5);
    CHECK(protocol.repetitions == 1);
    std::set<std::string> targets;
    for (const auto& c : protocol.combinations) {
        targets.insert(c.describe(cfg.schema()));
    }
    CHECK(targets.count("topic=sport,sentiment=positive") == 1);
    CHECK(targets.count("topic=world,sentiment=negative") == 1);
}

TEST_CASE("gridsearch writes a per-combination weight table") {
    TempRoot root("mcg_pipe_grid");
    RunConfig cfg = micro_config();
    cfg.gridsearch_generations = 4;
    Pipeline pipe(cfg, root.path);
    pipe.run(kAllStages);

    const auto table = pipe.run_gridsearch({{"topic", {0.5, 1.0}}, {"sentiment", {1.0}}});
    CHECK(table.size() == 4);
    for (const auto& [combo, weights] : table) {
        CHECK(weights.count("topic") == 1);
        CHECK(weights.count("sentiment") == 1);
        CHECK((weights.at("topic") == 0.5 || weights.at("topic") == 1.0));
    }
    CHECK(fs::exists(root.path / "gridsearch" / "weights.json"));
}

TEST_CASE("ablation harness prepares variants and reports rows") {
    TempRoot root("mcg_pipe_ablate");
    Pipeline pipe(micro_config(5), root.path);

    std::vector<AblationVariantSpec> variants;
    AblationVariantSpec intact;
    intact.name = "intact";
    intact.reuse_intact_model = true;
    variants.push_back(intact);
    AblationVariantSpec plain;
    plain.name = "no_counterfactual_no_resample";
    plain.counterfactual = false;
    plain.resample = false;
    plain.space_mode = "plain";
    variants.push_back(plain);
    AblationVariantSpec balance;
    balance.name = "infer_balance";
    balance.reuse_intact_model = true;
    balance.space_mode = "balanced";
    variants.push_back(balance);

    const auto rows = run_ablation(pipe, variants);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].name == "intact");
    CHECK(rows[1].name == "no_counterfactual_no_resample");
    CHECK(fs::exists(root.path / "ablate" / "report.txt"));
    CHECK(fs::exists(root.path / "ablate" / "report.json"));

    // The balanced variant really balanced its store.
    const auto store = space::load_space(root.path / "ablate" / "infer_balance" / "space.bin");
    for (int a = 0; a < 2; ++a) {
        std::array<int, 2> counts = {0, 0};
        for (int i = 0; i < store.rows(); ++i) {
            const auto& l = store.label(i);
            if (l.explicit_aspect == 0 && l.explicit_attr == a) {
                ++counts[static_cast<std::size_t>(l.implicit_attrs.at(1))];
            }
        }
        CHECK(counts[0] == counts[1]);
    }

    // Rerunning reuses the trained variant (manifest digest match) and yields
    // identical rows.
    const auto rows2 = run_ablation(pipe, variants);
    CHECK(rows2[1].report.to_json() == rows[1].report.to_json());

    // The default protocol covers the reference variant set.
    const auto defaults = default_ablation_protocol();
    CHECK(defaults.size() == 10);
    CHECK(defaults.front().name == "intact");
}

TEST_CASE("cli binary: end-to-end smoke, exit codes") {
    TempRoot root("mcg_pipe_cli");
    const std::string bin = MCG_BIN;
    const std::string cfg_file = (fs::temp_directory_path() / "mcg_cli_cfg.json").string();
    write_text_file(cfg_file, micro_overlay().dump());

    auto run = [&](const std::string& args) {
        const std::string cmd = bin + " " + args + " >/dev/null 2>&1";
        return std::system(cmd.c_str());
    };
    CHECK(run("--root " + root.path.string() + " --config " + cfg_file + " --seed 4 all") == 0);
    CHECK(run("--root " + root.path.string() + " --config " + cfg_file +
              " --seed 4 query --target topic=sport,sentiment=positive --k 3") == 0);
    // Unknown preset: nonzero exit.
    CHECK(run("--root " + root.path.string() + " --preset giant all") != 0);
    // Stage with missing upstream: nonzero exit.
    TempRoot empty("mcg_pipe_cli_empty");
    CHECK(run("--root " + empty.path.string() + " --config " + cfg_file + " train") != 0);
    fs::remove(cfg_file);
}
