#pragma once

// Subcommand front end: synth, train, infer, eval, probe, gradcheck.
//
// Exit status: 0 when the requested artifact was written, 2 on usage errors,
// 1 on any other failure.

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "pct/model.hpp"
#include "pct/synth.hpp"

namespace pct::cli {

enum class Split { Train, Val, All };

Split parse_split(std::string_view name);
bool in_split(int scene, Split split);

/// Samples of every scene in the split, read from the dataset files.
std::vector<model::Sample> load_samples(const synth::Dataset& ds, Split split, const model::ModelConfig& cfg);

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

}  // namespace pct::cli
