#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "arflow/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
    uint64_t seed = 0;
    bool seed_given = false;
    std::string out;
    bool quiet = false;
};

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--config", o.config_path, "config file (flat key = value)");
    sub->add_option("--set", o.sets, "inline override key=value (repeatable)");
    sub->add_option("--seed", o.seed, "run seed")->each([&](const std::string&) {
        o.seed_given = true;
    });
    sub->add_option("--out", o.out, "output directory");
    sub->add_flag("--quiet", o.quiet, "suppress progress output");
}

arflow::ExperimentConfig build_config(const CommonOpts& o) {
    auto cfg = arflow::parse_config(o.config_path, o.sets);
    if (o.seed_given) cfg.seed = o.seed;
    if (!o.out.empty()) cfg.out = o.out;
    cfg.validate();
    return cfg;
}

arflow::RunManifest load_or_new_manifest(const arflow::ExperimentConfig& cfg) {
    auto path = std::filesystem::path(cfg.out) / "manifest.json";
    if (std::filesystem::exists(path)) return arflow::RunManifest::load(path.string());
    return {};
}

void save_manifest(const arflow::ExperimentConfig& cfg, const arflow::RunManifest& m) {
    std::filesystem::create_directories(cfg.out);
    m.save((std::filesystem::path(cfg.out) / "manifest.json").string());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"arflow: autoregressive diffusion distillation lab"};
    app.require_subcommand(1);

    CommonOpts o_gen, o_s1, o_s2, o_s3, o_eval, o_pipe, o_cmp;
    int gen_count = 100;
    std::vector<std::string> cmp_dirs;

    auto* gen = app.add_subcommand("gen-data", "sample world sequences to CSV");
    add_common(gen, o_gen);
    gen->add_option("--count", gen_count, "number of sequences");

    auto* s1 = app.add_subcommand("stage1", "teacher-forcing diffusion training");
    add_common(s1, o_s1);
    auto* s2 = app.add_subcommand("stage2", "distillation (selected variant)");
    add_common(s2, o_s2);
    auto* s3 = app.add_subcommand("stage3", "asymmetric distribution matching");
    add_common(s3, o_s3);
    auto* ev = app.add_subcommand("eval", "evaluate the latest checkpoint");
    add_common(ev, o_eval);
    auto* pipe = app.add_subcommand("pipeline", "full stage1 -> stage2 -> stage3 -> eval run");
    add_common(pipe, o_pipe);
    auto* cmp = app.add_subcommand("compare", "tabulate finished runs");
    add_common(cmp, o_cmp);
    cmp->add_option("dirs", cmp_dirs, "run directories")->expected(-2);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto cfg = build_config(o_gen);
            std::filesystem::create_directories(cfg.out);
            auto batch = arflow::sample_sequences(cfg.world_spec(), gen_count, cfg.seed);
            auto path = (std::filesystem::path(cfg.out) / "data.csv").string();
            arflow::write_sequence_csv(path, batch);
            if (!o_gen.quiet) std::cout << "wrote " << path << "\n";
            return 0;
        }
        if (cmp->parsed()) {
            auto out = o_cmp.out.empty() ? std::string(".") : o_cmp.out;
            auto table = arflow::compare_runs(cmp_dirs, out);
            if (!o_cmp.quiet) std::cout << table;
            return 0;
        }

        const CommonOpts& o = s1->parsed()   ? o_s1
                              : s2->parsed() ? o_s2
                              : s3->parsed() ? o_s3
                              : ev->parsed() ? o_eval
                                             : o_pipe;
        auto cfg = build_config(o);

        if (pipe->parsed()) {
            auto manifest = arflow::run_pipeline(cfg);
            if (!o.quiet) std::cout << "status: " << manifest.status << "\n";
            return manifest.status == "ok" ? 0 : 2;
        }

        auto manifest = load_or_new_manifest(cfg);
        try {
            if (s1->parsed()) arflow::run_stage1(cfg, manifest);
            if (s2->parsed()) arflow::run_stage2(cfg, manifest);
            if (s3->parsed()) arflow::run_stage3(cfg, manifest);
            if (ev->parsed()) arflow::run_eval(cfg, manifest);
        } catch (const arflow::NumericError& e) {
            std::cerr << "stage failure: " << e.what() << "\n";
            save_manifest(cfg, manifest);
            return 2;
        }
        save_manifest(cfg, manifest);
        if (!o.quiet) std::cout << "ok: artifacts under " << cfg.out << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
