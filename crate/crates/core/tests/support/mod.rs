pub mod trace_oracle;
