#pragma once
// Dataset inventory. Stored as a JSON array of entries:
//   {"image_id": str, "split": "train"|"test", "label": "normal"|"anomalous",
//    "class_id"?: int, "feature_path"?: str, "score_path"?: str, "mask_path"?: str}
// Relative file references resolve against the manifest's directory.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cada {

enum class Split { Train, Test };
enum class Label { Normal, Anomalous };

std::string to_string(Split s);
std::string to_string(Label l);

struct ManifestEntry {
    std::string image_id;
    Split split = Split::Train;
    Label label = Label::Normal;
    // Only the oracle/classifier paths and per-class evaluation read this.
    std::optional<int> class_id;
    std::optional<std::string> feature_path;
    std::optional<std::string> score_path;
    std::optional<std::string> mask_path;

    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    // Directory relative references are resolved against; not serialized.
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const std::string& ref) const;

    std::vector<const ManifestEntry*> split(Split s) const;
    bool has_class_ids() const;  // true when every entry carries a class_id
    const ManifestEntry* find(const std::string& image_id) const;

    // Uniqueness, normal-only train split, masks only on anomalous entries.
    void validate() const;
    // Every referenced file exists.
    void validate_files() const;

    bool operator==(const DatasetManifest& o) const { return entries == o.entries; }
};

DatasetManifest read_manifest(const std::filesystem::path& path, bool check_files = false);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);

}  // namespace cada
