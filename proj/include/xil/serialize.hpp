#pragma once

// On-disk container: a line-oriented text manifest followed by raw
// little-endian array blobs. The manifest records each array's dtype, shape
// and byte offset plus an FNV-1a checksum over the whole blob section, so a
// corrupted file is always rejected with an error instead of crashing.
//
//   XIL1 <kind>
//   meta <key> = <value>
//   array <name> <dtype> <offset> <nbytes> <rank> <dims...>
//   blob <total_nbytes> <fnv1a64 hex>
//   END
//   <raw blob bytes>

#include "xil/architectures.hpp"
#include "xil/tasks.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>

namespace xil {

inline uint64_t fnv1a64(const unsigned char* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

class Container {
  public:
    struct Entry {
        std::string name;
        std::string dtype; // f32 | f64
        Shape shape;
        std::vector<unsigned char> bytes;
    };

    explicit Container(std::string kind = "dataset") : kind_(std::move(kind)) {}

    const std::string& kind() const { return kind_; }

    void set_meta(const std::string& key, const std::string& value) {
        if (key.find_first_of(" \n=") != std::string::npos) throw UsageError("bad meta key '" + key + "'");
        if (value.find('\n') != std::string::npos) throw UsageError("meta value must be single-line");
        for (auto& kv : meta_) {
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        }
        meta_.emplace_back(key, value);
    }

    std::string meta(const std::string& key) const {
        for (const auto& kv : meta_) {
            if (kv.first == key) return kv.second;
        }
        throw IoError("missing meta key '" + key + "'");
    }

    bool has_meta(const std::string& key) const {
        for (const auto& kv : meta_) {
            if (kv.first == key) return true;
        }
        return false;
    }

    const std::vector<std::pair<std::string, std::string>>& all_meta() const { return meta_; }

    template <class Scalar>
    void add_array(const std::string& name, Shape shape, const Scalar* data) {
        static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
        Entry e;
        e.name = name;
        e.dtype = std::is_same_v<Scalar, float> ? "f32" : "f64";
        e.shape = shape;
        const int64_t n = shape_numel(shape);
        e.bytes.resize(static_cast<size_t>(n) * sizeof(Scalar));
        std::memcpy(e.bytes.data(), data, e.bytes.size());
        arrays_.push_back(std::move(e));
    }

    template <class Real>
    void add_tensor(const std::string& name, const Tensor<Real>& t) {
        add_array(name, t.shape(), t.data());
    }

    const Entry& find(const std::string& name) const {
        for (const auto& e : arrays_) {
            if (e.name == name) return e;
        }
        throw IoError("array '" + name + "' not found in container");
    }

    bool has(const std::string& name) const {
        for (const auto& e : arrays_) {
            if (e.name == name) return true;
        }
        return false;
    }

    const std::vector<Entry>& arrays() const { return arrays_; }

    template <class Real>
    Tensor<Real> tensor(const std::string& name) const {
        const Entry& e = find(name);
        auto out = Tensor<Real>::zeros(e.shape);
        if (e.dtype == "f32") {
            const float* p = reinterpret_cast<const float*>(e.bytes.data());
            for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = static_cast<Real>(p[i]);
        } else {
            const double* p = reinterpret_cast<const double*>(e.bytes.data());
            for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = static_cast<Real>(p[i]);
        }
        return out;
    }

    std::vector<float> floats(const std::string& name) const {
        const Entry& e = find(name);
        if (e.dtype != "f32") throw IoError("array '" + name + "' is not f32");
        std::vector<float> out(e.bytes.size() / sizeof(float));
        std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
        return out;
    }

    void write(const std::string& path) const {
        std::vector<unsigned char> blob;
        std::ostringstream head;
        head << "XIL1 " << kind_ << "\n";
        for (const auto& kv : meta_) head << "meta " << kv.first << " = " << kv.second << "\n";
        for (const auto& e : arrays_) {
            head << "array " << e.name << " " << e.dtype << " " << blob.size() << " " << e.bytes.size()
                 << " " << e.shape.size();
            for (int64_t d : e.shape) head << " " << d;
            head << "\n";
            blob.insert(blob.end(), e.bytes.begin(), e.bytes.end());
        }
        head << "blob " << blob.size() << " " << hex64(fnv1a64(blob.data(), blob.size())) << "\n";
        head << "END\n";
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open '" + path + "' for writing");
        const std::string h = head.str();
        f.write(h.data(), static_cast<std::streamsize>(h.size()));
        f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
        if (!f) throw IoError("write failed for '" + path + "'");
    }

    static Container read(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open '" + path + "'");
        std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

        size_t pos = 0;
        auto next_line = [&]() -> std::string {
            if (pos >= raw.size()) throw IoError("truncated manifest");
            const size_t nl = raw.find('\n', pos);
            if (nl == std::string::npos) throw IoError("truncated manifest line");
            std::string line = raw.substr(pos, nl - pos);
            pos = nl + 1;
            return line;
        };

        auto header = next_line();
        if (header.rfind("XIL1 ", 0) != 0) throw IoError("bad container magic");
        Container c(header.substr(5));

        struct Rec {
            std::string name, dtype;
            int64_t offset = 0, nbytes = 0;
            Shape shape;
        };
        std::vector<Rec> recs;
        int64_t blob_size = -1;
        std::string checksum;
        while (true) {
            auto line = next_line();
            if (line == "END") break;
            std::istringstream ls(line);
            std::string tag;
            ls >> tag;
            if (tag == "meta") {
                std::string key, eq;
                ls >> key >> eq;
                if (eq != "=") throw IoError("bad meta line: " + line);
                std::string value;
                std::getline(ls, value);
                if (!value.empty() && value[0] == ' ') value.erase(0, 1);
                c.meta_.emplace_back(key, value);
            } else if (tag == "array") {
                Rec r;
                int64_t rank = 0;
                ls >> r.name >> r.dtype >> r.offset >> r.nbytes >> rank;
                if (!ls || rank < 0 || rank > 8) throw IoError("bad array line: " + line);
                for (int64_t i = 0; i < rank; ++i) {
                    int64_t d = 0;
                    ls >> d;
                    if (!ls || d <= 0 || d > (int64_t(1) << 32)) throw IoError("bad array dim: " + line);
                    r.shape.push_back(d);
                }
                if (r.dtype != "f32" && r.dtype != "f64") throw IoError("bad dtype: " + r.dtype);
                recs.push_back(std::move(r));
            } else if (tag == "blob") {
                ls >> blob_size >> checksum;
                if (!ls) throw IoError("bad blob line: " + line);
            } else {
                throw IoError("unknown manifest tag '" + tag + "'");
            }
        }
        if (blob_size < 0) throw IoError("manifest missing blob record");
        const int64_t remaining = static_cast<int64_t>(raw.size() - pos);
        if (remaining != blob_size) {
            throw IoError("blob size mismatch: manifest says " + std::to_string(blob_size) + ", file has " +
                          std::to_string(remaining));
        }
        const auto* blob = reinterpret_cast<const unsigned char*>(raw.data() + pos);
        if (hex64(fnv1a64(blob, static_cast<size_t>(blob_size))) != checksum) {
            throw IoError("checksum mismatch: blob corrupted");
        }
        for (auto& r : recs) {
            const int64_t width = r.dtype == "f32" ? 4 : 8;
            int64_t numel = 1;
            for (int64_t d : r.shape) {
                if (numel > (int64_t(1) << 40) / d) throw IoError("array too large: " + r.name);
                numel *= d;
            }
            if (r.nbytes != numel * width) throw IoError("array byte count mismatch: " + r.name);
            if (r.offset < 0 || r.nbytes < 0 || r.offset + r.nbytes > blob_size) {
                throw IoError("array '" + r.name + "' out of blob bounds");
            }
            Entry e;
            e.name = std::move(r.name);
            e.dtype = std::move(r.dtype);
            e.shape = std::move(r.shape);
            e.bytes.assign(blob + r.offset, blob + r.offset + r.nbytes);
            c.arrays_.push_back(std::move(e));
        }
        return c;
    }

  private:
    std::string kind_;
    std::vector<std::pair<std::string, std::string>> meta_;
    std::vector<Entry> arrays_;
};

// -------------------------------------------------------- dataset files

inline void save_reach_dataset(const ReachDataset& ds, const std::string& path, uint64_t seed) {
    Container c("dataset");
    c.set_meta("task", "bimodal_reach");
    c.set_meta("seed", std::to_string(seed));
    c.set_meta("n_pairs", std::to_string(ds.n_pairs));
    c.set_meta("history", std::to_string(ds.cfg.history));
    c.set_meta("action_horizon", std::to_string(ds.cfg.action_horizon));
    c.add_array("states", {ds.n_pairs, ds.cfg.history, 2}, ds.states.data());
    c.add_array("actions", {ds.n_pairs, ds.cfg.action_horizon, 2}, ds.actions.data());
    c.add_array("goal_ids", {ds.n_pairs}, ds.goal_ids.data());
    c.add_array("branches", {ds.n_pairs}, ds.branches.data());
    c.write(path);
}

inline ReachDataset load_reach_dataset(const std::string& path) {
    auto c = Container::read(path);
    if (c.kind() != "dataset" || c.meta("task") != "bimodal_reach") {
        throw IoError("'" + path + "' is not a bimodal_reach dataset");
    }
    ReachDataset ds;
    ds.n_pairs = std::stoll(c.meta("n_pairs"));
    ds.cfg.history = std::stoll(c.meta("history"));
    ds.cfg.action_horizon = std::stoll(c.meta("action_horizon"));
    ds.states = c.floats("states");
    ds.actions = c.floats("actions");
    ds.goal_ids = c.floats("goal_ids");
    ds.branches = c.floats("branches");
    const auto& st = c.find("states");
    if (st.shape != Shape{ds.n_pairs, ds.cfg.history, 2}) throw IoError("states shape mismatch");
    if (c.find("actions").shape != Shape{ds.n_pairs, ds.cfg.action_horizon, 2}) {
        throw IoError("actions shape mismatch");
    }
    return ds;
}

inline void save_pointcloud_dataset(const PointCloudDataset& ds, const std::string& path, uint64_t seed) {
    Container c("dataset");
    c.set_meta("task", "pointcloud_scene");
    c.set_meta("seed", std::to_string(seed));
    c.set_meta("n_samples", std::to_string(ds.n_samples));
    c.set_meta("n_points", std::to_string(ds.cfg.n_points));
    c.add_array("clouds", {ds.n_samples, ds.cfg.n_points, 3}, ds.clouds.data());
    c.add_array("centroids", {ds.n_samples, 3}, ds.centroids.data());
    c.add_array("goal_ids", {ds.n_samples}, ds.goal_ids.data());
    c.write(path);
}

inline PointCloudDataset load_pointcloud_dataset(const std::string& path) {
    auto c = Container::read(path);
    if (c.kind() != "dataset" || c.meta("task") != "pointcloud_scene") {
        throw IoError("'" + path + "' is not a pointcloud_scene dataset");
    }
    PointCloudDataset ds;
    ds.n_samples = std::stoll(c.meta("n_samples"));
    ds.cfg.n_points = std::stoll(c.meta("n_points"));
    ds.clouds = c.floats("clouds");
    ds.centroids = c.floats("centroids");
    ds.goal_ids = c.floats("goal_ids");
    if (c.find("clouds").shape != Shape{ds.n_samples, ds.cfg.n_points, 3}) {
        throw IoError("clouds shape mismatch");
    }
    return ds;
}

// --------------------------------------------------------- checkpoints

// key model-identity fields serialized next to the parameters; load fails
// with the first differing field named
inline std::vector<std::pair<std::string, std::string>> config_identity(const ModelConfig& cfg) {
    return {
        {"arch", cfg.arch},
        {"backbone", cfg.backbone},
        {"head", cfg.head},
        {"embed_dim", std::to_string(cfg.embed_dim)},
        {"heads", std::to_string(cfg.heads)},
        {"action_dim", std::to_string(cfg.action_dim)},
        {"action_horizon", std::to_string(cfg.action_horizon)},
        {"history", std::to_string(cfg.history)},
    };
}

template <class Real>
struct OptimizerSnapshot {
    int64_t step = 0;
    std::vector<std::pair<std::string, Tensor<Real>>> m, v;
};

template <class Real>
void save_checkpoint(PolicyModel<Real>& model, const OptimizerSnapshot<Real>* opt, const std::string& path,
                     const std::string& resolved_config_json = "") {
    Container c("checkpoint");
    for (const auto& kv : config_identity(model.cfg)) c.set_meta("cfg_" + kv.first, kv.second);
    if (!resolved_config_json.empty()) c.set_meta("config_json", resolved_config_json);
    c.set_meta("opt_step", std::to_string(opt ? opt->step : 0));
    model.for_each_param([&](const std::string& name, Tensor<Real>& t) { c.add_tensor("p/" + name, t); });
    if (opt) {
        for (const auto& kv : opt->m) c.add_tensor("m/" + kv.first, kv.second);
        for (const auto& kv : opt->v) c.add_tensor("v/" + kv.first, kv.second);
    }
    c.write(path);
}

// restores parameters (and optimizer moments when given) bitwise into an
// already-built model of the identical architecture
template <class Real>
void load_checkpoint(PolicyModel<Real>& model, OptimizerSnapshot<Real>* opt, const std::string& path) {
    auto c = Container::read(path);
    if (c.kind() != "checkpoint") throw IoError("'" + path + "' is not a checkpoint");
    for (const auto& kv : config_identity(model.cfg)) {
        const std::string stored = c.meta("cfg_" + kv.first);
        if (stored != kv.second) {
            throw IoError("checkpoint incompatible with model: field '" + kv.first + "' is '" + stored +
                          "' in file but '" + kv.second + "' in model");
        }
    }
    model.for_each_param([&](const std::string& name, Tensor<Real>& t) {
        const auto& e = c.find("p/" + name);
        if (e.shape != t.shape()) {
            throw IoError("checkpoint incompatible with model: parameter '" + name + "' has shape " +
                          shape_str(e.shape) + " in file but " + shape_str(t.shape()) + " in model");
        }
        auto loaded = c.tensor<Real>("p/" + name);
        std::copy(loaded.data(), loaded.data() + loaded.numel(), t.data());
    });
    if (opt) {
        opt->step = std::stoll(c.meta("opt_step"));
        opt->m.clear();
        opt->v.clear();
        model.for_each_param([&](const std::string& name, Tensor<Real>&) {
            opt->m.emplace_back(name, c.tensor<Real>("m/" + name));
            opt->v.emplace_back(name, c.tensor<Real>("v/" + name));
        });
    }
}

} // namespace xil
