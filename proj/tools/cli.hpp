#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "csdm/vendor_json.hpp"

namespace csdm::cli {

enum ExitCode : int { ok = 0, failure = 1, config_error = 2, numerical_error = 3, io_error = 4 };

// args excludes the program name. Reports and the list of written files go to
// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

const std::vector<std::string>& subcommand_names();

// Strict parse of one subcommand's config with every default filled in.
// Parsing the result again gives the same JSON.
nlohmann::json effective_config(const std::string& subcommand, const nlohmann::json& config);

}  // namespace csdm::cli
