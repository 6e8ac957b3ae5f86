// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ckptmerge {

enum class ErrorKind {
    Format,
    UnsupportedDtype,
    Io,
    StructureMismatch,
    BaseMismatch,
    EmptyInput,
    InvalidParameter,
    Numerical,
    IllConditioned,
    DegenerateInput,
    UnknownMethod,
    MissingField,
};

std::string_view error_kind_name(ErrorKind kind);

/// Base of every error raised by the toolkit. The kind is what the CLI maps to
/// an exit code; the concrete subclasses exist so callers can catch by type.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

template <ErrorKind K>
class KindError : public Error {
public:
    explicit KindError(const std::string& what) : Error(K, what) {}
};

using FormatError = KindError<ErrorKind::Format>;
using UnsupportedDtype = KindError<ErrorKind::UnsupportedDtype>;
using IoError = KindError<ErrorKind::Io>;
using StructureMismatch = KindError<ErrorKind::StructureMismatch>;
using BaseMismatch = KindError<ErrorKind::BaseMismatch>;
using EmptyInput = KindError<ErrorKind::EmptyInput>;
using InvalidParameter = KindError<ErrorKind::InvalidParameter>;
using NumericalError = KindError<ErrorKind::Numerical>;
using IllConditioned = KindError<ErrorKind::IllConditioned>;
using DegenerateInput = KindError<ErrorKind::DegenerateInput>;
using UnknownMethod = KindError<ErrorKind::UnknownMethod>;
using MissingField = KindError<ErrorKind::MissingField>;

/// Re-raises `e` with the same kind and `context` prepended to the message.
[[noreturn]] void rethrow_with_context(const Error& e, const std::string& context);

}  // namespace ckptmerge
