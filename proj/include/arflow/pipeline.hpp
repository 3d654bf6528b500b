#pragma once

#include <map>
#include <string>
#include <vector>

#include "arflow/config.hpp"
#include "arflow/metrics.hpp"
#include "arflow/stages.hpp"

namespace arflow {

// Everything a finished (or failed) run leaves behind, rooted at cfg.out.
struct RunManifest {
    uint64_t config_hash = 0;
    uint32_t artifact_version = 1;
    uint64_t seed = 0;
    std::string world;
    std::string schedule;
    std::string stage2_variant;
    std::string status = "ok";  // or "failed:<stage>: <message>"
    std::string timestamp;
    std::map<std::string, std::string> checkpoints;  // stage -> path
    std::map<std::string, std::string> reports;      // stage -> path
    std::string metrics_csv;
    std::map<std::string, double> metrics;  // summary scalars

    std::string to_json() const;
    void save(const std::string& path) const;
    static RunManifest load(const std::string& path);
};

// Individual resumable stages; each reads its predecessor's checkpoint from
// cfg.out and writes its own checkpoint plus stageN.report.json.
void run_stage1(const ExperimentConfig& cfg, RunManifest& manifest);
void run_stage2(const ExperimentConfig& cfg, RunManifest& manifest);
void run_stage3(const ExperimentConfig& cfg, RunManifest& manifest);
// evaluates the most advanced checkpoint and writes metrics.csv/metrics.json
void run_eval(const ExperimentConfig& cfg, RunManifest& manifest);

// Stage 1 -> Stage 2 (variant or skip) -> Stage 3 -> eval. On stage failure
// the manifest is marked failed at that stage and partial artifacts are kept.
RunManifest run_pipeline(const ExperimentConfig& cfg);

// Per-variant comparison table over finished runs; writes compare.csv and
// compare.txt under out_dir and returns the text table.
std::string compare_runs(const std::vector<std::string>& run_dirs, const std::string& out_dir);

}  // namespace arflow
