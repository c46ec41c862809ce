#pragma once

// JSON forms of configs and fitted models used by the command-line tool.

#include "mnkit/covmodels.hpp"
#include "mnkit/mnsrm.hpp"
#include "mnkit/synth.hpp"

#include <json.hpp>

#include <filesystem>
#include <initializer_list>
#include <string_view>

namespace mnkit::cli {

using json = nlohmann::json;

// Throws InputError if `j` is not an object or has a key outside `allowed`.
void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view context);

json matrix_to_json(const MatrixXd& m);  // array of rows
MatrixXd matrix_from_json(const json& j, std::string_view context);

json cov_spec_to_json(const CovSpec& spec);
CovSpec cov_spec_from_json(const json& j);

json to_json(const RsaSynthConfig& cfg);
json to_json(const SrmSynthConfig& cfg);
// Missing keys keep their defaults; unknown keys are an error.
RsaSynthConfig rsa_synth_from_json(const json& j);
SrmSynthConfig srm_synth_from_json(const json& j);

// A model directory holds manifest.json plus s, b (v × n), w_post_mean and
// w_post_colcov as binary matrix files.
void save_srm_model(const std::filesystem::path& dir, const SrmModel& model, SrmVariant variant);
struct LoadedSrmModel {
  SrmModel model;
  SrmVariant variant = SrmVariant::mn;
};
LoadedSrmModel load_srm_model(const std::filesystem::path& dir);

}  // namespace mnkit::cli
