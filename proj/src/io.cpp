#include "treet/io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace treet {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"input_dim", c.input_dim},
                {"embed_dim", c.embed_dim},
                {"head_count", c.head_count},
                {"head_dim", c.head_dim},
                {"ff_dim", c.ff_dim},
                {"output_dim", c.output_dim},
                {"memory", c.memory},
                {"activation", static_cast<int>(c.activation)},
                {"combine", static_cast<int>(c.combine)},
                {"pos_encoding", static_cast<int>(c.pos_encoding)},
                {"max_len", c.max_len}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.input_dim = j.at("input_dim");
    c.embed_dim = j.at("embed_dim");
    c.head_count = j.at("head_count");
    c.head_dim = j.at("head_dim");
    c.ff_dim = j.at("ff_dim");
    c.output_dim = j.at("output_dim");
    c.memory = j.at("memory");
    c.activation = static_cast<Activation>(j.at("activation").get<int>());
    c.combine = static_cast<Combine>(j.at("combine").get<int>());
    c.pos_encoding = static_cast<PosEncoding>(j.at("pos_encoding").get<int>());
    c.max_len = j.at("max_len");
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     std::uint64_t seed) {
    json j;
    j["config"] = config_to_json(params.config);
    j["seed"] = seed;
    json blocks = json::object();
    params.for_each_block([&blocks](const std::string& name, const Eigen::MatrixXd& m) {
        std::vector<double> data;
        data.reserve(m.size());
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
        blocks[name] = json{{"shape", {m.rows(), m.cols()}}, {"data", data}};
    });
    j["blocks"] = blocks;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out << j.dump();
}

ModelParams load_checkpoint(const std::filesystem::path& path, std::uint64_t* seed) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path.string());
    json j;
    in >> j;
    ModelParams p = ModelParams::zeros(config_from_json(j.at("config")));
    if (seed) *seed = j.value("seed", 0ULL);
    const auto& blocks = j.at("blocks");
    p.for_each_block([&blocks, &path](const std::string& name, Eigen::MatrixXd& m) {
        if (!blocks.contains(name))
            throw std::runtime_error("checkpoint " + path.string() + " missing block " + name);
        const auto& b = blocks.at(name);
        const auto shape = b.at("shape");
        if (shape[0].get<Eigen::Index>() != m.rows() || shape[1].get<Eigen::Index>() != m.cols())
            throw std::runtime_error("checkpoint block " + name + " has wrong shape");
        const auto& data = b.at("data");
        std::size_t idx = 0;
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = data[idx++].get<double>();
    });
    return p;
}

int CsvTable::column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i] == name) return static_cast<int>(i);
    return -1;
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open CSV: " + path.string());
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty CSV: " + path.string());
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
            while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
            t.columns.push_back(cell);
        }
    }
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        bool ok = true;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t pos = 0;
                const double v = std::stod(cell, &pos);
                row.push_back(v);
            } catch (const std::exception&) {
                ok = false;
                break;
            }
        }
        if (ok && row.size() == t.columns.size() &&
            std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); })) {
            t.rows.push_back(std::move(row));
        } else {
            ++t.dropped_rows;
        }
    }
    return t;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& columns,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write CSV: " + path.string());
    out.precision(12);
    for (std::size_t i = 0; i < columns.size(); ++i)
        out << columns[i] << (i + 1 < columns.size() ? ',' : '\n');
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i)
            out << row[i] << (i + 1 < row.size() ? ',' : '\n');
    }
}

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace treet
