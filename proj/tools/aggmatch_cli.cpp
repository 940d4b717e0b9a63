// Experiment runner: trains a method/seed grid from a JSON config and dumps
// features, attention weights or queue contents from saved checkpoints.
//
//   aggmatch run <config.json> [--section.key=value ...]
//   aggmatch dump <config.json> --what=<features|attention|queue> [overrides]
//
// Exit codes: 0 success, 2 invalid config or missing input, 3 runtime abort.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <aggmatch/experiment.hpp>

namespace {

void print_usage(std::ostream& os) {
    os << "usage:\n"
       << "  aggmatch run <config.json> [--section.key=value ...]\n"
       << "  aggmatch dump <config.json> --what=<features|attention|queue> "
          "[--section.key=value ...]\n";
}

int load_config(const std::string& path, const std::vector<std::string>& overrides,
                aggmatch::ExperimentConfig& out) {
    std::ifstream in(path);
    if (!in) {
        std::cerr << "error: cannot open config " << path << "\n";
        return aggmatch::kExitConfig;
    }
    aggmatch::json root = aggmatch::json::parse(in, nullptr, false);
    if (root.is_discarded()) {
        std::cerr << "error: config " << path << " is not valid JSON\n";
        return aggmatch::kExitConfig;
    }
    try {
        aggmatch::apply_overrides(root, overrides);
        out = aggmatch::parse_experiment_config(root);
    } catch (const aggmatch::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return aggmatch::kExitConfig;
    }
    return aggmatch::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.size() < 2) {
        print_usage(std::cerr);
        return aggmatch::kExitConfig;
    }
    const std::string command = args[0];
    const std::string config_path = args[1];

    std::string what;
    std::vector<std::string> overrides;
    for (std::size_t i = 2; i < args.size(); ++i) {
        std::string arg = args[i];
        if (arg.rfind("--", 0) != 0) {
            std::cerr << "error: unexpected argument '" << arg << "'\n";
            print_usage(std::cerr);
            return aggmatch::kExitConfig;
        }
        arg = arg.substr(2);
        if (arg.rfind("what=", 0) == 0) {
            what = arg.substr(5);
        } else {
            overrides.push_back(arg);
        }
    }

    aggmatch::ExperimentConfig cfg;
    if (int rc = load_config(config_path, overrides, cfg); rc != aggmatch::kExitOk)
        return rc;

    try {
        if (command == "run") {
            aggmatch::run_experiment(cfg, std::cout);
            return aggmatch::kExitOk;
        }
        if (command == "dump") {
            if (what.empty()) {
                std::cerr << "error: dump requires --what=<features|attention|queue>\n";
                return aggmatch::kExitConfig;
            }
            const std::string path = aggmatch::dump_artifacts(cfg, what);
            std::cout << "wrote " << path << "\n";
            return aggmatch::kExitOk;
        }
    } catch (const aggmatch::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return aggmatch::kExitConfig;
    } catch (const aggmatch::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return aggmatch::kExitConfig;
    } catch (const aggmatch::NonFiniteLoss& e) {
        std::cerr << "error: " << e.what() << "; " << e.diagnostics << "\n";
        return aggmatch::kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return aggmatch::kExitRuntime;
    }

    std::cerr << "error: unknown command '" << command << "'\n";
    print_usage(std::cerr);
    return aggmatch::kExitConfig;
}
