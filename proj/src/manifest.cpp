#include "cada/manifest.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "cada/error.hpp"

namespace cada {

using nlohmann::json;

std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }
std::string to_string(Label l) { return l == Label::Normal ? "normal" : "anomalous"; }

std::filesystem::path DatasetManifest::resolve(const std::string& ref) const {
    std::filesystem::path p(ref);
    return p.is_absolute() ? p : base_dir / p;
}

std::vector<const ManifestEntry*> DatasetManifest::split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == s) out.push_back(&e);
    return out;
}

bool DatasetManifest::has_class_ids() const {
    if (entries.empty()) return false;
    for (const auto& e : entries)
        if (!e.class_id) return false;
    return true;
}

const ManifestEntry* DatasetManifest::find(const std::string& image_id) const {
    for (const auto& e : entries)
        if (e.image_id == image_id) return &e;
    return nullptr;
}

void DatasetManifest::validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (e.image_id.empty()) fail(ErrorKind::Data, "manifest entry with empty image_id");
        if (!seen.insert(e.image_id).second) fail(ErrorKind::Data, "duplicate image_id: " + e.image_id);
        if (e.split == Split::Train && e.label == Label::Anomalous)
            fail(ErrorKind::Data, "anomalous image in train split: " + e.image_id);
        if (e.mask_path && e.label != Label::Anomalous)
            fail(ErrorKind::Data, "mask_path on a normal image: " + e.image_id);
    }
}

void DatasetManifest::validate_files() const {
    for (const auto& e : entries) {
        for (const auto* ref : {&e.feature_path, &e.score_path, &e.mask_path}) {
            if (*ref && !std::filesystem::exists(resolve(**ref)))
                fail(ErrorKind::Data, "dangling file reference for " + e.image_id + ": " + **ref);
        }
    }
}

namespace {

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    fail(ErrorKind::Data, "unknown split: " + s);
}

Label parse_label(const std::string& s) {
    if (s == "normal") return Label::Normal;
    if (s == "anomalous") return Label::Anomalous;
    fail(ErrorKind::Data, "unknown label: " + s);
}

template <typename T>
std::optional<T> optional_field(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return it->get<T>();
}

}  // namespace

DatasetManifest read_manifest(const std::filesystem::path& path, bool check_files) {
    std::ifstream f(path);
    if (!f) fail(ErrorKind::Data, "cannot open manifest: " + path.string());
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        fail(ErrorKind::Data, path.string() + ": " + e.what());
    }
    if (!doc.is_array()) fail(ErrorKind::Data, path.string() + ": manifest must be a JSON array");

    DatasetManifest m;
    m.base_dir = path.parent_path();
    try {
        for (const auto& j : doc) {
            ManifestEntry e;
            e.image_id = j.at("image_id").get<std::string>();
            e.split = parse_split(j.at("split").get<std::string>());
            e.label = parse_label(j.at("label").get<std::string>());
            e.class_id = optional_field<int>(j, "class_id");
            e.feature_path = optional_field<std::string>(j, "feature_path");
            e.score_path = optional_field<std::string>(j, "score_path");
            e.mask_path = optional_field<std::string>(j, "mask_path");
            m.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Data, path.string() + ": " + e.what());
    }
    m.validate();
    if (check_files) m.validate_files();
    return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    m.validate();
    json doc = json::array();
    for (const auto& e : m.entries) {
        json j;
        j["image_id"] = e.image_id;
        j["split"] = to_string(e.split);
        j["label"] = to_string(e.label);
        if (e.class_id) j["class_id"] = *e.class_id;
        if (e.feature_path) j["feature_path"] = *e.feature_path;
        if (e.score_path) j["score_path"] = *e.score_path;
        if (e.mask_path) j["mask_path"] = *e.mask_path;
        doc.push_back(std::move(j));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail(ErrorKind::Data, "cannot open for writing: " + path.string());
    f << doc.dump(2) << '\n';
    if (!f) fail(ErrorKind::Data, "write failed: " + path.string());
}

}  // namespace cada
