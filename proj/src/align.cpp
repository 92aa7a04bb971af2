#include "cada/align.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cada/error.hpp"

namespace cada {

StatVariant parse_variant(const std::string& s) {
    if (s == "meanmax") return StatVariant::MeanMax;
    if (s == "meanstd") return StatVariant::MeanStd;
    fail(ErrorKind::Usage, "unknown stat variant: " + s + " (expected meanmax|meanstd)");
}

std::string to_string(StatVariant v) { return v == StatVariant::MeanMax ? "meanmax" : "meanstd"; }

std::vector<ClassStats> fit_class_stats(const ClassGroups& groups) {
    std::vector<ClassStats> out;
    for (const auto& [cls, maps] : groups) {
        if (maps.empty()) fail(ErrorKind::Data, "class " + std::to_string(cls) + " has no training maps");
        ClassStats st;
        st.class_id = cls;
        st.n_images = maps.size();
        double sum = 0.0, max_sum = 0.0;
        for (const Tensor* m : maps) {
            if (m->size() == 0) fail(ErrorKind::Data, "empty score map in class " + std::to_string(cls));
            for (double v : m->data) sum += v;
            max_sum += *std::max_element(m->data.begin(), m->data.end());
            st.n_pixels += m->size();
        }
        st.u = sum / static_cast<double>(st.n_pixels);
        st.gamma = max_sum / static_cast<double>(st.n_images);
        double ss = 0.0;
        for (const Tensor* m : maps)
            for (double v : m->data) ss += (v - st.u) * (v - st.u);
        st.sigma = std::sqrt(ss / static_cast<double>(st.n_pixels));
        out.push_back(st);
    }
    return out;
}

Normalized normalize_meanmax(const Tensor& map, double u, double gamma, double eps) {
    Normalized r{map, false};
    double denom = gamma - u;
    if (!(denom >= eps)) {
        denom = eps;
        r.clamped = true;
    }
    for (double& v : r.map.data) v = (v - u) / denom;
    return r;
}

Normalized normalize_meanstd(const Tensor& map, double u, double sigma, double eps) {
    if (!(sigma >= 0.0)) fail(ErrorKind::Usage, "sigma must be non-negative");
    return normalize_meanmax(map, u, u + 3.0 * sigma, eps);
}

const ClassStats& find_stats(std::span<const ClassStats> stats, int class_id) {
    for (const auto& s : stats)
        if (s.class_id == class_id) return s;
    fail(ErrorKind::Data, "no fitted statistics for class_id " + std::to_string(class_id));
}

AlignedSet apply_oracle_alignment(const MapSet& maps, const std::map<std::string, int>& class_of,
                                  std::span<const ClassStats> stats, StatVariant variant, double eps) {
    AlignedSet out;
    for (const auto& [id, map] : maps) {
        auto it = class_of.find(id);
        if (it == class_of.end()) fail(ErrorKind::Usage, "image " + id + " has no class_id");
        const auto& st = find_stats(stats, it->second);
        auto n = variant == StatVariant::MeanMax ? normalize_meanmax(map, st.u, st.gamma, eps)
                                                 : normalize_meanstd(map, st.u, st.sigma, eps);
        out.clamped += n.clamped ? 1 : 0;
        out.maps.emplace(id, std::move(n.map));
    }
    return out;
}

void write_class_stats_csv(std::ostream& os, std::span<const ClassStats> stats) {
    os << "class_id,u_c,gamma_c,sigma_c,n_images,n_pixels\n";
    char buf[160];
    for (const auto& s : stats) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%zu,%zu\n", s.class_id, s.u, s.gamma, s.sigma, s.n_images,
                      s.n_pixels);
        os << buf;
    }
}

void write_class_stats_csv(const std::string& path, std::span<const ClassStats> stats) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail(ErrorKind::Data, "cannot open for writing: " + path);
    write_class_stats_csv(f, stats);
}

std::vector<ClassStats> read_class_stats_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorKind::Data, "cannot open class stats: " + path);
    std::string line;
    std::getline(f, line);
    if (line != "class_id,u_c,gamma_c,sigma_c,n_images,n_pixels")
        fail(ErrorKind::Data, path + ": unexpected class stats header");
    std::vector<ClassStats> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> c;
        std::stringstream ss(line);
        for (std::string x; std::getline(ss, x, ',');) c.push_back(x);
        if (c.size() != 6) fail(ErrorKind::Data, path + ": malformed row: " + line);
        try {
            out.push_back({std::stoi(c[0]), std::stod(c[1]), std::stod(c[2]), std::stod(c[3]), std::stoull(c[4]),
                           std::stoull(c[5])});
        } catch (const std::logic_error&) {
            fail(ErrorKind::Data, path + ": malformed row: " + line);
        }
    }
    return out;
}

}  // namespace cada
