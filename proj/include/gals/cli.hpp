#pragma once
// Command-line pipeline: data synthesis, grounder training, attention
// precomputation, classifier training, evaluation and visualization. Every
// command stamps its output directory with a run manifest and refuses to
// share that directory with a concurrent run.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace gals {

struct RunManifest {
    std::string command;
    std::string config_path;  // "-" when driven by flags alone
    std::vector<std::pair<std::string, std::string>> config_echo;
    uint64_t seed = 0;
    std::string build_id;
    std::string out_dir;
};

// <dir>/manifest.txt, key=value echo of the resolved configuration
void write_run_manifest(const std::string& dir, const RunManifest& m);

// exclusive .gals.lock inside a directory; held for the command's lifetime
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

// exit codes: 0 success, 2 usage/config, 3 I/O, 4 parse, 5 missing dependency
int run_cli(int argc, char** argv);

}  // namespace gals
