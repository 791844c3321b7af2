// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Error hierarchy. Every error carries a stable machine-readable code that the
// CLI writes into its failure record.

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace deskmoe {

class Error : public std::runtime_error {
   public:
    Error(std::string code, const std::string& what) : std::runtime_error(what), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

   private:
    std::string code_;
};

#define DESKMOE_DEFINE_ERROR(Name, Code)                                      \
    class Name : public Error {                                               \
       public:                                                                \
        explicit Name(const std::string& what) : Error(Code, what) {}         \
    };

DESKMOE_DEFINE_ERROR(DimensionError, "dimension")
DESKMOE_DEFINE_ERROR(ContractError, "contract")
DESKMOE_DEFINE_ERROR(NumericError, "numeric")
DESKMOE_DEFINE_ERROR(ConfigError, "config")
DESKMOE_DEFINE_ERROR(InputError, "input")
DESKMOE_DEFINE_ERROR(PlanError, "plan")
DESKMOE_DEFINE_ERROR(ScheduleError, "schedule")
DESKMOE_DEFINE_ERROR(EmptyBatchError, "empty_batch")
DESKMOE_DEFINE_ERROR(OversizeError, "oversize")
DESKMOE_DEFINE_ERROR(AssignmentError, "assignment")
DESKMOE_DEFINE_ERROR(CheckpointError, "checkpoint")
DESKMOE_DEFINE_ERROR(SelectionError, "selection")
DESKMOE_DEFINE_ERROR(MalformedResponse, "malformed_response")
DESKMOE_DEFINE_ERROR(ReportError, "report")
DESKMOE_DEFINE_ERROR(FormatError, "format")

#undef DESKMOE_DEFINE_ERROR

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream oss;
    (oss << ... << std::forward<Args>(args));
    return oss.str();
}

}  // namespace detail

}  // namespace deskmoe
