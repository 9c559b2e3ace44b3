#include "l2p/checkpoint.hpp"

#include <cmath>
#include <set>

#include <json.hpp>

#include "l2p/errors.hpp"
#include "l2p/io.hpp"

namespace l2p {

using nlohmann::json;

void save_checkpoint(const std::vector<Parameter*>& params, const std::string& path) {
  json arrays = json::object();
  for (const Parameter* p : params) {
    if (arrays.contains(p->name))
      throw ContractError("duplicate parameter name '" + p->name + "'");
    json entry;
    entry["rows"] = p->value.rows();
    entry["cols"] = p->value.cols();
    entry["values"] = std::vector<double>(p->value.data(),
                                          p->value.data() + p->value.size());
    arrays[p->name] = std::move(entry);
  }
  json root;
  root["format"] = "l2p-checkpoint";
  root["arrays"] = std::move(arrays);
  write_file_atomic(path, root.dump(2) + "\n");
}

void load_checkpoint(const std::vector<Parameter*>& params, const std::string& path) {
  json root;
  try {
    root = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DatasetError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  if (!root.is_object() || root.value("format", "") != "l2p-checkpoint" ||
      !root.contains("arrays") || !root["arrays"].is_object())
    throw DatasetError("checkpoint " + path + " has an unexpected layout");
  const json& arrays = root["arrays"];

  std::set<std::string> used;
  for (Parameter* p : params) {
    if (!arrays.contains(p->name))
      throw DatasetError("checkpoint " + path + " is missing array '" + p->name + "'");
    const json& entry = arrays[p->name];
    if (!entry.is_object() || !entry.contains("rows") || !entry.contains("cols") ||
        !entry.contains("values") || !entry["values"].is_array())
      throw DatasetError("checkpoint array '" + p->name + "' has an unexpected layout");
    const int rows = entry["rows"].get<int>();
    const int cols = entry["cols"].get<int>();
    if (rows != p->value.rows() || cols != p->value.cols())
      throw DatasetError("checkpoint array '" + p->name + "' is " +
                         std::to_string(rows) + "x" + std::to_string(cols) +
                         " but the parameter is " + p->value.shape_str());
    const json& values = entry["values"];
    if (values.size() != p->value.size())
      throw DatasetError("checkpoint array '" + p->name + "' has " +
                         std::to_string(values.size()) + " values");
    for (size_t i = 0; i < p->value.size(); ++i) {
      if (!values[i].is_number())
        throw DatasetError("checkpoint array '" + p->name + "' has a non-numeric entry");
      const double x = values[i].get<double>();
      if (!std::isfinite(x))
        throw DatasetError("checkpoint array '" + p->name + "' has a non-finite entry");
      p->value[i] = x;
    }
    used.insert(p->name);
  }
  for (const auto& [name, _] : arrays.items())
    if (!used.count(name))
      throw DatasetError("checkpoint " + path + " has unknown array '" + name + "'");
}

}  // namespace l2p
