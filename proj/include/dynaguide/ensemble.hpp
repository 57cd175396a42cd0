#pragma once

#include <string>
#include <vector>

#include "dynaguide/field.hpp"

namespace dynaguide {

/// Ensemble forecasts and aligned truth: values[n][b][j] and truth[n][j]
/// for forecast n, member b and lead j (lead 0 is one step ahead).
struct EnsembleForecast {
    std::size_t forecasts = 0, members = 0, leads = 0;
    std::vector<Field> values;
    std::vector<Field> truth;
    AreaWeights weights;

    const Field& value(std::size_t n, std::size_t b, std::size_t j) const {
        return values[(n * members + b) * leads + j];
    }
    const Field& truth_at(std::size_t n, std::size_t j) const { return truth[n * leads + j]; }

    void validate() const {
        if (values.size() != forecasts * members * leads)
            throw ShapeError("ensemble holds " + std::to_string(values.size()) + " fields, expected " +
                             std::to_string(forecasts * members * leads));
        if (truth.size() != forecasts * leads) throw ShapeError("ensemble truth is missing or misaligned");
        if (values.empty()) return;
        const auto& f0 = values.front();
        for (const auto& v : values)
            if (!v.same_shape(f0)) throw ShapeError("ensemble members disagree: " + f0.shape_string() + " vs " + v.shape_string());
        for (const auto& v : truth)
            if (!v.same_shape(f0)) throw ShapeError("truth " + v.shape_string() + " vs forecast " + f0.shape_string());
        if (weights.size() != f0.height()) throw ShapeError("area weights do not match grid height");
    }
};

}  // namespace dynaguide
