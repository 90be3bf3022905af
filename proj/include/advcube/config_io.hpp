#pragma once

#include "advcube/attack.hpp"
#include "advcube/detector.hpp"
#include "advcube/eval.hpp"
#include "advcube/scenegen.hpp"

#include <json.hpp>

#include <filesystem>

namespace advcube {

void to_json(nlohmann::json& j, const ConvSpec& c);
void from_json(const nlohmann::json& j, ConvSpec& c);
void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);
void to_json(nlohmann::json& j, const TrainConfig& t);
void from_json(const nlohmann::json& j, TrainConfig& t);
void to_json(nlohmann::json& j, const ScenegenConfig& s);
void from_json(const nlohmann::json& j, ScenegenConfig& s);
void to_json(nlohmann::json& j, const AttackConfig& a);
void from_json(const nlohmann::json& j, AttackConfig& a);
void to_json(nlohmann::json& j, const ExperimentGrid& g);
void from_json(const nlohmann::json& j, ExperimentGrid& g);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

template <typename T>
T load_config(const std::filesystem::path& path) {
  return read_json(path).get<T>();
}

}  // namespace advcube
